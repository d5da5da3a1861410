fn main() {
    std::process::exit(sinkscope::cli::run(std::env::args_os()));
}
