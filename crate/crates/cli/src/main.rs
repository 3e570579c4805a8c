fn main() {
    std::process::exit(mmcr_cli::dispatch(std::env::args_os()));
}
