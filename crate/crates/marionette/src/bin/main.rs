fn main() {
    println!("marionette: CLI wiring lands after the harness module");
}
