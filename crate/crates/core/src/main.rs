fn main() {
    std::process::exit(avatar_lcm::cli::main_with_args(std::env::args_os()));
}
