//! Cut chips around points from a pool of two rasters (a deflated, tiled
//! GeoTIFF and a FlatRaster), first as per-band CSVs and then into a record file.
//!
//! cargo run --release --example extract_chips -- [out_dir]

use std::path::PathBuf;

use causal_chips::geochip::{
    extract_from_pool, read_chip_dir, write_flat_raster, ChipFormat, ChipRequest, GeoTiffWriter, GeoTransform, SampleType,
    RECORD_FILE_NAME,
};
use causal_chips::recordstore::RecordFile;

fn main() -> anyhow::Result<()> {
    let out: PathBuf = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("causal-chips-extract"), PathBuf::from);
    std::fs::create_dir_all(&out)?;

    // Two 64x64 three-band scenes side by side, 0.01 degree pixels.
    let (w, h, bands) = (64, 64, 3);
    let west_geo = GeoTransform::new(30.0, 2.0, 0.01, 0.01)?;
    let east_geo = GeoTransform::new(30.64, 2.0, 0.01, 0.01)?;
    let pixel = |r: usize, c: usize, b: usize| ((r as f64 / 6.0).sin() + (c as f64 / 9.0).cos()) * 40.0 + 100.0 + 30.0 * b as f64;

    let west = out.join("west.tif");
    let row_major: Vec<f64> = (0..h * w * bands).map(|i| pixel(i / (w * bands), i / bands % w, i % bands)).collect();
    GeoTiffWriter { sample_type: SampleType::U16, deflate: true, tiles: Some((16, 16)), ..Default::default() }.write(&west, w, h, bands, &row_major, &west_geo)?;

    let east = out.join("east.flat");
    let band_major: Vec<f64> = (0..h * w * bands).map(|i| pixel(i % (h * w) / w, i % w, i / (h * w)) + 5.0).collect();
    write_flat_raster(&east, w, h, bands, &east_geo, &band_major)?;

    let requests = vec![
        ChipRequest::new("village_a", 30.20, 1.80, 16),
        ChipRequest::new("village_b", 30.95, 1.60, 16),
        ChipRequest::new("edge", 30.02, 1.98, 16),
        ChipRequest::new("far_away", 40.0, 10.0, 16),
    ];
    let pool = [west, east];

    let csv_dir = out.join("chips_csv");
    let report = extract_from_pool(&requests, &pool, &csv_dir, ChipFormat::Csv, None)?;
    for c in &report.chips {
        println!("{:<10} {:?}", c.key, c.status);
    }
    let chips = read_chip_dir(&csv_dir)?;
    println!("{} chips read back from {}", chips.len(), csv_dir.display());

    // Padding rescues the window that overhangs the west edge.
    let rec_dir = out.join("chips_record");
    let report = extract_from_pool(&requests, &pool, &rec_dir, ChipFormat::Record, Some(0.0))?;
    let file = RecordFile::open(rec_dir.join(RECORD_FILE_NAME))?;
    println!("{} of {} chips in {}", report.matched(), requests.len(), rec_dir.join(RECORD_FILE_NAME).display());
    for key in file.keys() {
        let t = file.get(key)?;
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.len() as f64;
        println!("  {key:<10} dims {:?} mean {mean:.2}", t.dims());
    }
    Ok(())
}
