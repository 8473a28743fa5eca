fn main() {
    std::process::exit(prod_core::cli::dispatch(std::env::args_os()));
}
