fn main() {
    std::process::exit(camforge::cli::main());
}
