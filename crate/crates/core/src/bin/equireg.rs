fn main() {
    std::process::exit(equireg::expcli::cli::run(std::env::args_os()));
}
