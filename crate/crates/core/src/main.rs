fn main() {
    std::process::exit(fusefuzz::run_cli());
}
