fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(atp_cli::run(&argv));
}
