fn main() {
    std::process::exit(alertscore::cli::run(std::env::args_os()));
}
