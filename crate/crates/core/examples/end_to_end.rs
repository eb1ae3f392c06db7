//! The full staged run from `examples/config/run.json`: simulate and ingest,
//! wrangle both datasets, index, train three models in parallel, infer,
//! select fridges for an event and write the report.
//!
//!     cargo run --release --example end_to_end
//!
//! Same as `coldchain --config crates/core/examples/config/run.json run`.

fn main() {
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/config/run.json");
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut argv = vec!["coldchain".to_owned(), "--config".into(), config.into()];
    argv.extend(args);
    if argv.len() == 3 {
        argv.push("run".into());
    }
    std::process::exit(coldchain::cli::main_with_args(argv));
}
