fn main() {
    std::process::exit(melkit::run(std::env::args_os()));
}
