fn main() {
    eprintln!("flare CLI: not yet wired");
    std::process::exit(2);
}
