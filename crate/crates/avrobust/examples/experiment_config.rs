//! Parses an experiment config, applies command-line style overrides and
//! prints the fully resolved text that runs record beside their artifacts.

use avrobust::attacks::{Norm, Range};
use avrobust::harness::{parse_config_verbose, Overrides};

const TEXT: &str = "
# victim and attack for a quick run
[dataset]
classes = 4
clips = 200

[attack]
epsilon = 0.3
freq_mask = 0:20

[paths]
workdir = runs/demo
";

fn main() -> avrobust::Result<()> {
    let parsed = parse_config_verbose(TEXT)?;
    println!("{} keys took defaults", parsed.defaulted.len());
    let mut cfg = parsed.config;
    Overrides {
        norm: Some(Norm::Linf),
        epsilon: Some(2.0),
        time_mask: Some(Range::new(0, 200)?),
        seed: Some(11),
        ..Default::default()
    }
    .apply(&mut cfg)?;
    print!("{}", cfg.to_text());

    match avrobust::harness::parse_config("[paths]\n[attack]\nepsilon = -1\n") {
        Err(e) => println!("rejected: {e} (exit code {})", e.exit_code()),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
