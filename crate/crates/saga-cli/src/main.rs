fn main() {
    // Placeholder while the library stabilizes; replaced by the real CLI.
    eprintln!("not yet implemented");
    std::process::exit(2);
}
