fn main() {
    std::process::exit(biodw_service::cli::main());
}
