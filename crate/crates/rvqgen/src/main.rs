fn main() {
    std::process::exit(rvqgen::cli::run(std::env::args()) as i32);
}
