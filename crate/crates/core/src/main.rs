fn main() {
    std::process::exit(noresqa::cli::run_command(std::env::args_os()));
}
