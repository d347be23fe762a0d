//! Write keyed tensors to a record file, read them back by key and in order,
//! then flip one byte and let the validator find it.
//!
//! cargo run --release --example record_store -- [path]

use std::path::PathBuf;

use causal_chips::recordstore::{read_by_keys, read_sequential, validate, write_records};
use causal_chips::ImageTensor;

fn main() -> anyhow::Result<()> {
    let path: PathBuf = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("causal-chips-demo.circ"), PathBuf::from);

    let chips: Vec<(String, ImageTensor)> = (0..5)
        .map(|i| (format!("site{i}"), ImageTensor::from_fn(8, 8, 2, |r, c, b| (i * 100 + r * 8 + c) as f32 + 0.5 * b as f32)))
        .collect();
    let file = write_records(chips.iter().map(|(k, t)| (k.as_str(), t)), &path)?;
    println!("wrote {} records to {}", file.count, path.display());

    let picked = read_by_keys(&path, &["site3", "site0"])?;
    println!("site3 starts with {:?}, site0 with {:?}", &picked[0].data()[..3], &picked[1].data()[..3]);
    let keys: Vec<String> = read_sequential(&path)?.map(|r| r.map(|(k, _)| k)).collect::<Result<_, _>>()?;
    println!("sequential order: {keys:?}");
    println!("clean file: {} findings", validate(&path)?.findings.len());

    let mut bytes = std::fs::read(&path)?;
    let target = file.offset_of("site2").unwrap() as usize + 40;
    bytes[target] ^= 0x01;
    std::fs::write(&path, &bytes)?;
    for f in validate(&path)?.findings {
        println!("after flipping byte {target}: {f:?}");
    }
    Ok(())
}
