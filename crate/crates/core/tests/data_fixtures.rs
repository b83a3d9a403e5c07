//! Parsed counts of the hand-built fixtures.

use std::collections::BTreeSet;
use std::path::PathBuf;

use sgnet::data::{
    build_windows, load_bbox_csv, load_bev_text, load_paths, CoordKind, DatasetSpec, FeatureSet, Format, NormKind,
};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn bev_fixture_tracks_and_windows() {
    let tracks = load_bev_text(&fixture("three_agents.txt"), 2.5, None).unwrap();
    assert_eq!(tracks.len(), 4);
    assert_eq!(tracks.iter().map(|t| t.agent).collect::<BTreeSet<_>>().len(), 3);
    assert_eq!(tracks.iter().map(|t| t.len()).sum::<usize>(), 24);
    let mut lens: Vec<(u64, usize)> = tracks.iter().map(|t| (t.agent, t.len())).collect();
    lens.sort();
    assert_eq!(lens, vec![(1, 10), (2, 5), (2, 5), (3, 4)]);
    assert!(tracks.iter().all(|t| t.stride == 10 && t.scene == "three_agents"));

    let spec = DatasetSpec {
        obs_len: 3,
        pred_len: 2,
        overlap: 0.5,
        ..DatasetSpec::default()
    };
    let windows = build_windows(&tracks, &spec, 0).unwrap();
    assert_eq!(windows.len(), 4);
    assert_eq!(windows.iter().map(|w| w.id).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
}

#[test]
fn box_fixture_tracks_aux_and_pixel_norm() {
    let tracks = load_bbox_csv(&fixture("three_boxes.csv"), 30.0, None).unwrap();
    assert_eq!(tracks.len(), 4);
    assert_eq!(tracks.iter().map(|t| t.len()).sum::<usize>(), 15);
    assert!(tracks.iter().all(|t| t.stride == 1 && t.aux.iter().all(|r| r.len() == 2)));

    let spec = DatasetSpec {
        format: Format::BboxCsv,
        fps: 30.0,
        obs_len: 2,
        pred_len: 2,
        coords: CoordKind::Box,
        features: FeatureSet::Position,
        norm: NormKind::Pixel {
            width: 1920.0,
            height: 1080.0,
        },
        ..DatasetSpec::default()
    };
    let tracks = load_paths(&[fixture("three_boxes.csv")], &spec).unwrap();
    let windows = build_windows(&tracks, &spec, 0).unwrap();
    let corner = windows.iter().find(|w| w.agent == 9).unwrap();
    assert_eq!(corner.positions[0], vec![0.9375, 900.0 / 1080.0, 1.0, 1.0]);
    assert_eq!(corner.aux[0], vec![0.0, 0.0]);
}

#[test]
fn box_fixture_reduces_to_centroids() {
    let spec = DatasetSpec {
        format: Format::BboxCsv,
        fps: 30.0,
        coords: CoordKind::Centroid,
        ..DatasetSpec::default()
    };
    let tracks = load_paths(&[fixture("three_boxes.csv")], &spec).unwrap();
    let seven = tracks.iter().find(|t| t.agent == 7).unwrap();
    assert_eq!(seven.states[0], vec![120.0, 240.0]);
}
