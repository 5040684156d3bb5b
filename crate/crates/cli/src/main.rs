use clap::Parser;

/// On failure, emits one machine-readable error record to stderr and exits
/// nonzero; the record carries the full cause chain.
fn main() {
    let cli = mobforge::Cli::parse();
    if let Err(err) = mobforge::run(&cli) {
        let record = serde_json::json!({
            "error": {
                "message": format!("{err:#}"),
                "chain": err.chain().map(|cause| cause.to_string()).collect::<Vec<_>>(),
            }
        });
        eprintln!("{record}");
        std::process::exit(1);
    }
}
