use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use raremem::persist;
use raremem::task::Token;
use raremem::{MemoryStore, NONE_VALUE};

use crate::config::{usage, ConfigFile, PathArg, Settings};
use crate::run::MEMORY_FILE;

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Memory snapshot, or a checkpoint directory containing one.
    #[arg(long, value_name = "PATH")]
    snapshot: Option<PathArg>,
    /// Print this slot.
    #[arg(long, conflicts_with = "top_ages")]
    slot: Option<usize>,
    /// Print the N oldest slots.
    #[arg(long, value_name = "N")]
    top_ages: Option<usize>,
}

const KEYS: &[&str] = &["snapshot", "slot", "top-ages"];

fn describe(store: &MemoryStore, slot: usize) -> String {
    let value = store.values()[slot];
    let label = match value {
        NONE_VALUE => "none".to_string(),
        v => Token::from_id(v).map_or_else(|| v.to_string(), |t| format!("{v} ({t})")),
    };
    let key: Vec<String> = store.key(slot).iter().map(|x| format!("{x:.4}")).collect();
    format!(
        "slot={slot} age={} value={label} key=[{}]",
        store.age(slot),
        key.join(" ")
    )
}

pub fn inspect_memory(args: InspectArgs, file: Option<ConfigFile>) -> Result<()> {
    let mut s = Settings::new(file, KEYS)?;
    let snapshot = s.required("snapshot", args.snapshot)?.0;
    let slot = s.optional("slot", args.slot)?;
    let top_ages = s.optional("top-ages", args.top_ages)?;
    s.log("inspect-memory");

    let path: PathBuf = if snapshot.is_dir() {
        snapshot.join(MEMORY_FILE)
    } else {
        snapshot
    };
    let store: MemoryStore = persist::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let empty = store.values().iter().filter(|&&v| v == NONE_VALUE).count();
    println!(
        "slots={} key_size={} updates={} empty={empty}",
        store.len(),
        store.key_size(),
        store.update_count()
    );

    match (slot, top_ages) {
        (Some(i), None) => {
            if i >= store.len() {
                return Err(usage(format!("--slot {i} is out of range (memory has {} slots)", store.len())));
            }
            println!("{}", describe(&store, i));
        }
        (None, Some(n)) => {
            let ages = store.ages();
            let mut order: Vec<usize> = (0..store.len()).collect();
            order.sort_by(|&a, &b| ages[b].cmp(&ages[a]).then(a.cmp(&b)));
            for i in order.into_iter().take(n) {
                println!("{}", describe(&store, i));
            }
        }
        _ => return Err(usage("give exactly one of --slot or --top-ages")),
    }
    Ok(())
}
