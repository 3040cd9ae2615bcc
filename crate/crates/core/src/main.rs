fn main() {
    std::process::exit(del_sim::cli::main_with_args(std::env::args_os()));
}
