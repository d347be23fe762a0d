use std::fs;
use std::path::{Path, PathBuf};

use causal_chips::geochip::{
    extract_chip, extract_from_pool, parse_raster, pixel_to_world, read_chip_csv, read_chip_dir, tiff::COMPRESSION_JPEG, world_to_pixel,
    write_chip_csv, write_flat_raster, BandSelection, ChipFormat, ChipRequest, ChipStatus, GeoError, GeoTiffWriter, GeoTransform,
    SampleType,
};
use causal_chips::recordstore::RecordFile;
use causal_chips::ImageTensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `v(r, c, b) = 100 b + 10 r + c`, band-major for FlatRaster.
fn flat(dir: &Path, name: &str, w: usize, h: usize, bands: usize, geo: GeoTransform) -> PathBuf {
    let data: Vec<f64> = (0..bands * h * w).map(|i| (100 * (i / (h * w)) + 10 * (i % (h * w) / w) + i % w) as f64).collect();
    let path = dir.join(name);
    write_flat_raster(&path, w, h, bands, &geo, &data).unwrap();
    path
}

fn geo(ox: f64, oy: f64, px: f64) -> GeoTransform {
    GeoTransform::new(ox, oy, px, px).unwrap()
}

#[test]
fn flat_header_echo() {
    let dir = tempfile::tempdir().unwrap();
    let path = flat(dir.path(), "f.flat", 100, 100, 1, geo(0.0, 100.0, 1.0));
    let r = parse_raster(&path).unwrap();
    assert_eq!((r.width, r.height, r.band_count), (100, 100, 1));
    assert_eq!(r.geo.origin_y, 100.0);
    assert_eq!(r.sample_type, SampleType::F32);
}

#[test]
fn golden_four_by_four() {
    let dir = tempfile::tempdir().unwrap();
    let r = parse_raster(flat(dir.path(), "g.flat", 4, 4, 1, geo(0.0, 4.0, 1.0))).unwrap();
    // Pixel (1,1) covers lon [1,2), lat (2,3].
    let chip = extract_chip(&r, &ChipRequest::new("a", 1.5, 2.5, 2), None).unwrap();
    assert_eq!(chip.dims(), &[2, 2, 1]);
    assert_eq!(chip.data(), &[0.0, 1.0, 10.0, 11.0]);
    let one = extract_chip(&r, &ChipRequest::new("b", 3.5, 1.5, 1), None).unwrap();
    assert_eq!(one.data(), &[23.0]);
    let three = extract_chip(&r, &ChipRequest::new("c", 2.5, 1.5, 3), None).unwrap();
    assert_eq!(three.data(), &[11.0, 12.0, 13.0, 21.0, 22.0, 23.0, 31.0, 32.0, 33.0]);
}

fn tiff_data(w: usize, h: usize, bands: usize, st: SampleType) -> Vec<f64> {
    (0..w * h * bands)
        .map(|i| {
            let v = (i * 37 % 251) as f64;
            if st == SampleType::F32 {
                v * 0.25 - 7.5
            } else {
                v
            }
        })
        .collect()
}

#[test]
fn tiff_variants_read_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (w, h, bands) = (37, 23, 3);
    let g = geo(10.0, 50.0, 0.5);
    for st in [SampleType::U8, SampleType::U16, SampleType::F32] {
        let data = tiff_data(w, h, bands, st);
        for deflate in [false, true] {
            for tiles in [None, Some((16, 16))] {
                let path = dir.path().join(format!("t_{st:?}_{deflate}_{}.tif", tiles.is_some()));
                let writer = GeoTiffWriter { sample_type: st, deflate, tiles, rows_per_strip: 5, ..Default::default() };
                writer.write(&path, w, h, bands, &data, &g).unwrap();
                let r = parse_raster(&path).unwrap();
                assert_eq!((r.width, r.height, r.band_count, r.sample_type), (w, h, bands, st));
                assert_eq!(r.geo, g);
                let window = r.read_window(0, 0, h, w, &[0, 1, 2], None).unwrap();
                let want: Vec<f32> = data.iter().map(|&v| v as f32).collect();
                assert_eq!(window.data(), &want[..], "{st:?} deflate={deflate} tiles={tiles:?}");
                let part = r.read_window(17, 30, 5, 6, &[2], None).unwrap();
                for rr in 0..5 {
                    for cc in 0..6 {
                        assert_eq!(part.pixel(rr, cc, 0), want[((17 + rr) * w + 30 + cc) * bands + 2]);
                    }
                }
            }
        }
    }
}

#[test]
fn tiff_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let g = geo(0.0, 10.0, 1.0);
    let data = vec![1.0; 16];
    let no_geo = dir.path().join("nogeo.tif");
    GeoTiffWriter { omit_geo: true, ..Default::default() }.write(&no_geo, 4, 4, 1, &data, &g).unwrap();
    assert!(matches!(parse_raster(&no_geo), Err(GeoError::MissingGeoTags(_))));

    let jpeg = dir.path().join("jpeg.tif");
    GeoTiffWriter { compression_override: Some(COMPRESSION_JPEG), ..Default::default() }.write(&jpeg, 4, 4, 1, &data, &g).unwrap();
    assert!(matches!(parse_raster(&jpeg), Err(GeoError::UnsupportedFormat(_))));

    let junk = dir.path().join("junk.tif");
    fs::write(&junk, b"definitely not a raster").unwrap();
    assert!(matches!(parse_raster(&junk), Err(GeoError::CorruptFile(_))));

    let ok = dir.path().join("ok.tif");
    GeoTiffWriter::default().write(&ok, 4, 4, 1, &data, &g).unwrap();
    let bytes = fs::read(&ok).unwrap();
    fs::write(&junk, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(parse_raster(&junk), Err(GeoError::CorruptFile(_))));
}

#[test]
fn chip_csv_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let chip = ImageTensor::from_fn(9, 9, 2, |_, _, _| f32::from_bits(rng.random_range(0x0080_0000u32..0x7f00_0000)) * if rng.random() { -1.0 } else { 1.0 });
    let paths = write_chip_csv(dir.path(), "unit_7", &chip, &[1, 2]).unwrap();
    assert_eq!(paths[0].file_name().unwrap(), "Keyunit_7_BAND1.csv");
    let text = fs::read_to_string(&paths[1]).unwrap();
    assert!(text.starts_with("c1,c2,c3,c4,c5,c6,c7,c8,c9\n"));
    assert_eq!(text.lines().count(), 10);
    let back = read_chip_csv(dir.path(), "unit_7", &[1, 2]).unwrap();
    assert_eq!(back, chip);
    assert_eq!(read_chip_dir(dir.path()).unwrap(), vec![("unit_7".to_string(), chip)]);
}

#[test]
fn pool_matching() {
    let dir = tempfile::tempdir().unwrap();
    let west = flat(dir.path(), "west.flat", 10, 10, 2, geo(0.0, 10.0, 1.0));
    let east = flat(dir.path(), "east.flat", 10, 10, 2, geo(20.0, 10.0, 1.0));
    let out = dir.path().join("chips");
    let reqs = vec![ChipRequest::new("w", 5.5, 5.5, 3), ChipRequest::new("e", 25.5, 5.5, 3), ChipRequest::new("nowhere", 15.0, 5.0, 3)];
    let report = extract_from_pool(&reqs, &[west.clone(), east.clone()], &out, ChipFormat::Csv, None).unwrap();
    assert_eq!(report.status_of("w"), Some(ChipStatus::Matched { raster: 0 }));
    assert_eq!(report.status_of("e"), Some(ChipStatus::Matched { raster: 1 }));
    assert_eq!(report.unmatched_keys(), vec!["nowhere"]);
    let mut files: Vec<String> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    files.sort();
    assert_eq!(files, ["Keye_BAND1.csv", "Keye_BAND2.csv", "Keyw_BAND1.csv", "Keyw_BAND2.csv"]);

    // Overlapping rasters: the first in pool order wins.
    let twin = flat(dir.path(), "twin.flat", 10, 10, 1, geo(0.0, 10.0, 1.0));
    let r = extract_from_pool(&reqs[..1], &[twin.clone(), west.clone()], &dir.path().join("o1"), ChipFormat::Csv, None).unwrap();
    assert_eq!(r.status_of("w"), Some(ChipStatus::Matched { raster: 0 }));
    let r = extract_from_pool(&reqs[..1], &[west, twin], &dir.path().join("o2"), ChipFormat::Csv, None).unwrap();
    assert_eq!(r.status_of("w"), Some(ChipStatus::Matched { raster: 0 }));
}

#[test]
fn clipped_windows_fall_through_or_pad() {
    let dir = tempfile::tempdir().unwrap();
    let small = flat(dir.path(), "small.flat", 4, 4, 1, geo(0.0, 4.0, 1.0));
    let big = flat(dir.path(), "big.flat", 12, 12, 1, geo(-4.0, 8.0, 1.0));
    let req = [ChipRequest::new("edge", 0.5, 3.5, 3)];
    let r = extract_from_pool(&req, &[small.clone(), big], &dir.path().join("a"), ChipFormat::Csv, None).unwrap();
    assert_eq!(r.status_of("edge"), Some(ChipStatus::Matched { raster: 1 }));
    let r = extract_from_pool(&req, std::slice::from_ref(&small), &dir.path().join("b"), ChipFormat::Csv, None).unwrap();
    assert_eq!(r.status_of("edge"), Some(ChipStatus::Unmatched));
    let r = extract_from_pool(&req, &[small], &dir.path().join("c"), ChipFormat::Csv, Some(0.0)).unwrap();
    assert_eq!(r.status_of("edge"), Some(ChipStatus::Matched { raster: 0 }));
}

#[test]
fn record_output_and_order_invariance() {
    let dir = tempfile::tempdir().unwrap();
    let a = flat(dir.path(), "a.flat", 20, 20, 1, geo(0.0, 20.0, 1.0));
    let b = flat(dir.path(), "b.flat", 20, 20, 1, geo(10.0, 20.0, 1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let reqs: Vec<ChipRequest> = (0..40).map(|i| ChipRequest::new(format!("p{i}"), rng.random_range(-2.0..32.0), rng.random_range(0.0..20.0), 5)).collect();
    let pool = [a, b];
    let base = extract_from_pool(&reqs, &pool, &dir.path().join("r0"), ChipFormat::Record, None).unwrap();
    let mut shuffled = reqs.clone();
    shuffled.reverse();
    shuffled.swap(3, 17);
    let other = extract_from_pool(&shuffled, &pool, &dir.path().join("r1"), ChipFormat::Record, None).unwrap();
    for r in &reqs {
        assert_eq!(base.status_of(&r.key), other.status_of(&r.key));
    }
    let f0 = RecordFile::open(dir.path().join("r0/chips.circ")).unwrap();
    let f1 = RecordFile::open(dir.path().join("r1/chips.circ")).unwrap();
    assert_eq!(f0.count as usize, base.matched());
    for k in f0.keys() {
        assert_eq!(f0.get(k).unwrap(), f1.get(k).unwrap());
    }
}

#[test]
fn duplicate_keys_and_bad_bands() {
    let dir = tempfile::tempdir().unwrap();
    let a = flat(dir.path(), "a.flat", 8, 8, 2, geo(0.0, 8.0, 1.0));
    let reqs = [ChipRequest::new("k", 4.0, 4.0, 2), ChipRequest::new("k", 5.0, 4.0, 2)];
    assert!(matches!(extract_from_pool(&reqs, std::slice::from_ref(&a), dir.path(), ChipFormat::Csv, None), Err(GeoError::DuplicateKey(_))));
    let r = parse_raster(&a).unwrap();
    let req = ChipRequest { bands: BandSelection::List(vec![3]), ..ChipRequest::new("k", 4.0, 4.0, 2) };
    assert!(matches!(extract_chip(&r, &req, None), Err(GeoError::InvalidBand { band: 3, band_count: 2 })));
    let req = ChipRequest { bands: BandSelection::List(vec![2]), ..ChipRequest::new("k", 4.5, 3.5, 1) };
    assert_eq!(extract_chip(&r, &req, None).unwrap().data(), &[144.0]);
}

proptest! {
    #[test]
    fn pixel_world_round_trip(
        ox in -180.0f64..180.0, oy in -90.0f64..90.0,
        px in 1e-5f64..1.0, py in 1e-5f64..1.0,
        row in 0i64..5000, col in 0i64..5000,
    ) {
        let g = GeoTransform::new(ox, oy, px, py).unwrap();
        let (lon, lat) = pixel_to_world(&g, row, col);
        prop_assert_eq!(world_to_pixel(&g, lon, lat), (row, col));
    }
}
