fn main() {
    std::process::exit(axial_style::cli::run(std::env::args_os()));
}
