fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(georef::cli::cli_dispatch(&argv));
}
