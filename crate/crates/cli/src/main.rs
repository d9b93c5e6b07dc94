fn main() {
    std::process::exit(mvldp_cli::main_with_args(std::env::args_os()));
}
