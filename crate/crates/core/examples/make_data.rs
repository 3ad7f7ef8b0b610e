//! Writes seeded text-to-image and editing shards as JSON lines.
//!
//! cargo run --release --example make_data -- [count] [out_dir]

use std::path::PathBuf;

use nep_core::data::{parse_edit_shard, write_dataset, ShardKind};

fn main() -> nep_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let count: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let dir = PathBuf::from(args.get(2).cloned().unwrap_or_else(|| "data".into()));
    std::fs::create_dir_all(&dir)?;
    write_dataset(ShardKind::T2i, count, 0, &dir.join("t2i.jsonl"))?;
    write_dataset(ShardKind::Edit, count, 1, &dir.join("edit.jsonl"))?;
    let edits = parse_edit_shard(&std::fs::read_to_string(dir.join("edit.jsonl"))?)?;
    for e in edits.iter().take(3) {
        println!("{:?}: {}", e.op, e.instruction);
    }
    println!("wrote {count} + {count} records to {}", dir.display());
    Ok(())
}
