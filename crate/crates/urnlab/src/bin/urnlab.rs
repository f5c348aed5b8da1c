fn main() {
    std::process::exit(urnlab::cli::run());
}
