fn main() {
    std::process::exit(crevnet::cli::dispatch(std::env::args_os()));
}
