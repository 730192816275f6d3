fn main() {
    std::process::exit(pcet::cli::main());
}
