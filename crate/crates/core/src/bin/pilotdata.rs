fn main() {
    std::process::exit(pilot_data::cli::main());
}
