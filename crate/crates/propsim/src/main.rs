fn main() {
    std::process::exit(propsim::cli::main_entry());
}
