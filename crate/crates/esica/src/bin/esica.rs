fn main() {
    // CLI wiring lands once the library surface is complete.
}
