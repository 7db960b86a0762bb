pub mod calibrate;
pub mod evaluate;
pub mod info;
pub mod reconstruct;
pub mod simulate;
pub mod study;
pub mod train;

use anyhow::{bail, Result};

use crate::RunContext;

/// Rejects `--config` for subcommands that take no configuration file.
pub(crate) fn no_config(ctx: &RunContext, name: &str) -> Result<()> {
    if ctx.common.config.is_some() {
        bail!("`{name}` takes no --config file; pass its settings as flags");
    }
    Ok(())
}
