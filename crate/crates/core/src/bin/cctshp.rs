fn main() {
    std::process::exit(cct_shp::cli::run_from(std::env::args_os()));
}
