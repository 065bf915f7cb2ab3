fn main() {
    std::process::exit(msmix::cli::run_from(std::env::args_os()));
}
