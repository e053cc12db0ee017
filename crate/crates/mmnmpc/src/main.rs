fn main() {
    println!("mmnmpc CLI: subcommands arrive with the harness module");
}
