fn main() {
    std::process::exit(ner_forge::cli::run(std::env::args_os()));
}
