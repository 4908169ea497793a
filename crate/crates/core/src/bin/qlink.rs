fn main() {
    std::process::exit(qlink::cli::dispatch(std::env::args_os()));
}
