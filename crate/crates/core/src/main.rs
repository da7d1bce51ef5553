fn main() {
    std::process::exit(sol_mini::cli::main());
}
