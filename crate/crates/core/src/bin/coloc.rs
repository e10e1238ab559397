fn main() {
    std::process::exit(coloc::cli::main_exit_code());
}
