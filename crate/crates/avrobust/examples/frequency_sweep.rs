//! Runs a small frequency-mask sweep through the experiment harness and
//! prints the resulting table.

use avrobust::attacks::Range;
use avrobust::harness::{cmd_sweep, parse_config, Axis, SweepPlan};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let cfg = parse_config(&format!(
        "[dataset]\nclasses = 4\nclips = 120\nclip_seconds = 2\n\
         [train]\nepochs = 3\n\
         [attack]\nnorm = linf\nalpha = 0.5\nsteps = 10\n\
         [paths]\nworkdir = {}\n",
        dir.path().display()
    ))?;
    let band = |lo, hi| Some(Range { lo, hi });
    let plan = SweepPlan::masks(Axis::Frequency, &[None, band(0, 32), band(32, 64)], &[2.0, 5.0])?;
    let out = cmd_sweep(&plan, &cfg, None)?;
    print!("{}", out.csv);
    Ok(())
}
