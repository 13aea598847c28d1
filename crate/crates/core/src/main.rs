fn main() {
    std::process::exit(kernel_flows::cli::run(std::env::args_os()));
}
