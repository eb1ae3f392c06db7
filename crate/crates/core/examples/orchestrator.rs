//! Staged worker pools: stages run in order, each with at most `pool_width`
//! scripts alive at once. Built-in tasks run in-process; external scripts
//! get their context through environment variables and flags.
//!
//!     cargo run --example orchestrator

use std::sync::Arc;
use std::time::Duration;

use coldchain::orchestrator::{
    max_concurrency, BuiltinTasks, ContextBase, EventKind, Orchestrator, ScriptSpec, StageName, StageSpec, WorkerContext,
};
use serde_json::json;

struct Sleepy;

impl BuiltinTasks for Sleepy {
    fn run(&self, name: &str, ctx: &WorkerContext, log: &mut dyn std::io::Write) -> Result<(), String> {
        let ms = ctx.extra_args.get("ms").and_then(|v| v.as_u64()).unwrap_or(10);
        std::thread::sleep(Duration::from_millis(ms));
        if name == "fail" {
            return Err("asked to fail".into());
        }
        writeln!(log, "{name} pe {}/{} in {:?}", ctx.pe_index, ctx.pe_total, ctx.stage_name).map_err(|e| e.to_string())
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let orch = Orchestrator::new(
        Arc::new(Sleepy),
        ContextBase {
            store_path: dir.path().join("store"),
            log_dir: Some(dir.path().join("logs")),
            ..ContextBase::default()
        },
    );
    let work = |n: usize| (0..n).map(|i| ScriptSpec::builtin("work").with_arg("ms", json!(20 + 10 * i))).collect::<Vec<_>>();
    let mut external = ScriptSpec::external("sh");
    external.argv = vec!["-c".into(), "echo external pe $PE_INDEX of $PE_TOTAL, store $STORE_PATH".into()];
    let stages = vec![
        StageSpec::new(StageName::Wrangle, 2, work(5)),
        StageSpec::new(StageName::Serve, 1, vec![external]),
        StageSpec::new(StageName::Learn, 3, work(6)),
        StageSpec::new(StageName::Infer, 2, vec![ScriptSpec::builtin("work"), ScriptSpec::builtin("fail")]),
        StageSpec::new(StageName::Infer, 1, work(1)),
    ];

    let run = orch.run_pipeline(&stages, true)?;
    for (i, r) in run.reports.iter().enumerate() {
        println!("stage {i} {:<8} width {} -> {:?}", r.stage.as_str(), r.pool_width, r.verdict);
        for s in &r.scripts {
            println!("  pe {} {:<12} {:.3}-{:.3} s {:?}", s.pe_index, s.label, s.started_s, s.ended_s, s.status);
        }
    }
    if let Some(log) = run.reports.get(1).and_then(|r| r.scripts[0].log_path.as_ref()) {
        print!("external log: {}", std::fs::read_to_string(log)?);
    }
    println!("peak concurrency per stage: {:?}", max_concurrency(&run.events));
    println!("starts: {}", run.events.iter().filter(|e| e.kind == EventKind::Start).count());
    println!("halted at stage {:?}; logs in {}", run.halted_at, dir.path().join("logs").display());
    Ok(())
}
