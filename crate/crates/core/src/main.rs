fn main() {
    std::process::exit(enkf_lab::cli::run(std::env::args_os()));
}
