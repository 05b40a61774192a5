fn main() {
    std::process::exit(policybank_harness::cli::main());
}
