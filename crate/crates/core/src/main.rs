fn main() {
    std::process::exit(actionseg::cli::run_from_env());
}
