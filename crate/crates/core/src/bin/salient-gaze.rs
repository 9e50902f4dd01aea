fn main() {
    std::process::exit(salient_gaze::cli::run(std::env::args_os()));
}
