use std::path::Path;
use std::time::Instant;

use hugs_core::sfm::{parse_reconstruction, write_reconstruction, ModelFormat, SfmError};
use hugs_core::synth::random_reconstruction;
use proptest::prelude::*;

const FILES_BIN: [&str; 3] = ["cameras.bin", "images.bin", "points3D.bin"];
const FILES_TXT: [&str; 3] = ["cameras.txt", "images.txt", "points3D.txt"];

fn read_all(dir: &Path, files: &[&str]) -> Vec<Vec<u8>> {
    files.iter().map(|f| std::fs::read(dir.join(f)).unwrap()).collect()
}

fn round_trip(points: usize, format: ModelFormat, files: &[&str]) -> f64 {
    let recon = random_reconstruction(points, 50, points as u64).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    write_reconstruction(&recon, &a, format).unwrap();
    let start = Instant::now();
    let parsed = parse_reconstruction(&a, format).unwrap();
    write_reconstruction(&parsed, &b, format).unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert_eq!(parsed, recon);
    assert_eq!(read_all(&a, files), read_all(&b, files));
    secs
}

#[test]
fn binary_round_trip_is_byte_identical() {
    for n in [1_000, 10_000] {
        let secs = round_trip(n, ModelFormat::Binary, &FILES_BIN);
        assert!(secs < 1.0, "{n} points took {secs:.3}s");
    }
}

#[test]
fn text_round_trip_is_line_identical() {
    for n in [1_000, 10_000] {
        let secs = round_trip(n, ModelFormat::Text, &FILES_TXT);
        assert!(secs < 1.0, "{n} points took {secs:.3}s");
    }
}

#[test]
fn text_and_binary_agree() {
    let recon = random_reconstruction(300, 12, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_reconstruction(&recon, &dir.path().join("t"), ModelFormat::Text).unwrap();
    write_reconstruction(&recon, &dir.path().join("b"), ModelFormat::Binary).unwrap();
    let t = parse_reconstruction(&dir.path().join("t"), ModelFormat::Auto).unwrap();
    let b = parse_reconstruction(&dir.path().join("b"), ModelFormat::Auto).unwrap();
    assert_eq!(t, b);
}

#[test]
fn truncated_binary_is_malformed() {
    let recon = random_reconstruction(50, 5, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_reconstruction(&recon, dir.path(), ModelFormat::Binary).unwrap();
    let path = dir.path().join("points3D.bin");
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    let err = parse_reconstruction(dir.path(), ModelFormat::Binary).unwrap_err();
    assert!(matches!(err, SfmError::MalformedRecord { .. }), "{err}");
}

#[test]
fn missing_model_directory() {
    let err = parse_reconstruction(Path::new("/nonexistent/sparse"), ModelFormat::Auto).unwrap_err();
    assert!(matches!(err, SfmError::MissingFile(_)), "{err}");
}

#[test]
fn match_counts_agree_with_brute_force() {
    let recon = random_reconstruction(400, 8, 4).unwrap();
    for (id, image) in recon.images() {
        let counts = recon.match_counts(*id).unwrap();
        for (idx, n) in counts {
            let others = match image.features[idx].point3d_id {
                Some(pid) => recon.points3d()[&pid].track.iter().filter(|e| e.image_id != *id).count(),
                None => 0,
            };
            assert_eq!(n as usize, others);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_random_model_round_trips(points in 0usize..200, images in 2u32..20, seed in any::<u64>()) {
        let recon = random_reconstruction(points, images, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for format in [ModelFormat::Binary, ModelFormat::Text] {
            write_reconstruction(&recon, dir.path(), format).unwrap();
            prop_assert_eq!(&parse_reconstruction(dir.path(), format).unwrap(), &recon);
        }
    }
}
