fn main() {
    fsopt::harness::cli_main();
}
