fn main() {
    std::process::exit(basinmerge::cli::run(std::env::args_os()));
}
