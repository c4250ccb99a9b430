fn main() {
    // CLI wired up in cli.rs; placeholder until the pipeline lands
    eprintln!("pcu: not yet implemented");
    std::process::exit(2);
}
