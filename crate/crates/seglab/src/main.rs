fn main() {
    std::process::exit(seglab::harness::run());
}
