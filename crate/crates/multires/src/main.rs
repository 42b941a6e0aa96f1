fn main() {
    std::process::exit(multires::cli::main_entry());
}
