fn main() {
    std::process::exit(llmregress::cli::run(std::env::args_os()));
}
