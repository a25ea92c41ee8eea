fn main() {
    std::process::exit(exitdvfs_cli::dispatch(std::env::args_os()));
}
