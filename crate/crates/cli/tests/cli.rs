//! End-to-end tests of the `rrfnn` binary: every subcommand, the exit-code
//! contract, and cross-thread determinism of grid outputs.

use std::path::Path;
use std::process::Output;

use rrfnn_core::data::load_cube;
use rrfnn_core::harness::strip_timing;

fn rrfnn(dir: &Path, args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_rrfnn"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary should spawn")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn assert_code(output: &Output, expected: i32) {
    assert_eq!(
        output.status.code(),
        Some(expected),
        "stdout:\n{}\nstderr:\n{}",
        stdout(output),
        stderr(output)
    );
}

/// Writes the shared tiny-scene config and generates scene.hsc/scene.lbl.
fn make_scene(dir: &Path) {
    std::fs::write(
        dir.join("scene.cfg"),
        "height=40\nwidth=40\nbands=5\nclass_count=4\nregion_granularity=8\n\
         signature_separation=1.0\nnoise_std=0.05\nspatial_blur=0\nbrightness_jitter=0\n\
         epochs=2\nhidden_count=3\nrank=2\n",
    )
    .unwrap();
    let out = rrfnn(
        dir,
        &["generate", "--config", "scene.cfg", "--seed", "11", "--out-dir", "."],
    );
    assert_code(&out, 0);
}

#[test]
fn generate_is_deterministic_and_reports_difficulty() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    make_scene(dir);
    let first = std::fs::read(dir.join("scene.hsc")).unwrap();
    let out = rrfnn(
        dir,
        &[
            "generate", "--config", "scene.cfg", "--seed", "11", "--out-cube", "again.hsc",
            "--out-labels", "again.lbl", "--preview", "truth.ppm",
        ],
    );
    assert_code(&out, 0);
    assert!(stdout(&out).contains("difficulty"), "{}", stdout(&out));
    assert_eq!(first, std::fs::read(dir.join("again.hsc")).unwrap());

    let preview = std::fs::read(dir.join("truth.ppm")).unwrap();
    assert!(preview.starts_with(b"P6\n40 40\n255\n"));
    assert_eq!(preview.len(), b"P6\n40 40\n255\n".len() + 40 * 40 * 3);

    let cube = load_cube(&dir.join("scene.hsc")).unwrap();
    assert_eq!((cube.height(), cube.width(), cube.bands()), (40, 40, 5));
}

#[test]
fn convert_wraps_raw_f32_values() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    let values: Vec<f32> = (0..2 * 3 * 2).map(|v| v as f32 * 0.5).collect();
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(dir.join("raw.bin"), bytes).unwrap();
    let out = rrfnn(
        dir,
        &[
            "convert", "--input", "raw.bin", "--height", "2", "--width", "3", "--bands", "2",
            "--output", "cube.hsc",
        ],
    );
    assert_code(&out, 0);
    let cube = load_cube(&dir.join("cube.hsc")).unwrap();
    assert_eq!((cube.height(), cube.width(), cube.bands()), (2, 3, 2));
    // Raw layout is band-sequential, so value index 0 is (0,0,band 0).
    assert_eq!(cube.get(0, 0, 0), 0.0);
    assert_eq!(cube.get(0, 1, 0), 0.5);
    assert_eq!(cube.get(0, 0, 1), 3.0);
}

#[test]
fn train_evaluate_render_pipeline_works() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    make_scene(dir);
    let out = rrfnn(
        dir,
        &[
            "train", "--config", "scene.cfg", "--seed", "1", "--cube", "scene.hsc", "--labels",
            "scene.lbl", "--tws", "3", "--ts", "8", "--out-model", "model.bin",
        ],
    );
    assert_code(&out, 0);
    let text = stdout(&out);
    assert!(text.contains("rank_r_fnn"), "{text}");
    assert!(text.contains("held-out accuracy"), "{text}");

    let out = rrfnn(
        dir,
        &["evaluate", "--cube", "scene.hsc", "--labels", "scene.lbl", "--model", "model.bin"],
    );
    assert_code(&out, 0);
    let text = stdout(&out);
    assert!(text.contains("overall accuracy"), "{text}");
    assert!(text.contains("confusion"), "{text}");

    let out = rrfnn(
        dir,
        &[
            "render", "--cube", "scene.hsc", "--labels", "scene.lbl", "--model", "model.bin",
            "--output", "pred.ppm",
        ],
    );
    assert_code(&out, 0);
    let map = std::fs::read(dir.join("pred.ppm")).unwrap();
    assert!(map.starts_with(b"P6\n40 40\n255\n"));

    // Dense variant round-trips through the same pipeline.
    let out = rrfnn(
        dir,
        &[
            "train", "--config", "scene.cfg", "--cube", "scene.hsc", "--labels", "scene.lbl",
            "--variant", "dense_fnn", "--tws", "3", "--ts", "8", "--out-model", "dense.bin",
        ],
    );
    assert_code(&out, 0);
    let out = rrfnn(
        dir,
        &["evaluate", "--cube", "scene.hsc", "--labels", "scene.lbl", "--model", "dense.bin"],
    );
    assert_code(&out, 0);
    assert!(stdout(&out).contains("dense_fnn"));
}

#[test]
fn grid_rows_match_the_sweep_and_ignore_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    make_scene(dir);
    let grid_args = |threads: &str, out: &str| {
        vec![
            "grid".to_string(),
            "--config".into(),
            "scene.cfg".into(),
            "--set".into(),
            "tws_values=3".into(),
            "--set".into(),
            "ts_values=4,6".into(),
            "--set".into(),
            "repeats=2".into(),
            "--seed".into(),
            "5".into(),
            "--threads".into(),
            threads.into(),
            "--out-dir".into(),
            out.into(),
            "--cube".into(),
            "scene.hsc".into(),
            "--labels".into(),
            "scene.lbl".into(),
        ]
    };
    let args: Vec<String> = grid_args("1", "seq");
    let out = rrfnn(dir, &args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_code(&out, 0);
    let args: Vec<String> = grid_args("4", "par");
    let out = rrfnn(dir, &args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_code(&out, 0);

    let runs_seq = std::fs::read_to_string(dir.join("seq/runs.csv")).unwrap();
    let runs_par = std::fs::read_to_string(dir.join("par/runs.csv")).unwrap();
    // 1 tws x 2 ts x 2 variants x 2 repeats.
    assert_eq!(runs_seq.lines().count(), 1 + 8);
    assert_eq!(strip_timing(&runs_seq), strip_timing(&runs_par));

    let summary_seq = std::fs::read_to_string(dir.join("seq/summary.csv")).unwrap();
    let summary_par = std::fs::read_to_string(dir.join("par/summary.csv")).unwrap();
    assert_eq!(summary_seq.lines().count(), 1 + 4);
    assert_eq!(strip_timing(&summary_seq), strip_timing(&summary_par));
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    make_scene(dir);

    let out = rrfnn(
        dir,
        &["train", "--cube", "scene.hsc", "--labels", "scene.lbl", "--epochs", "0"],
    );
    assert_code(&out, 1);
    assert!(stderr(&out).contains("epochs"), "{}", stderr(&out));

    let out = rrfnn(dir, &["generate", "--set", "epocs=3"]);
    assert_code(&out, 1);
    assert!(stderr(&out).contains("valid keys"), "{}", stderr(&out));

    let out = rrfnn(
        dir,
        &["train", "--cube", "scene.hsc", "--labels", "scene.lbl", "--variant", "cnn"],
    );
    assert_code(&out, 1);

    let out = rrfnn(dir, &["no-such-command"]);
    assert_code(&out, 1);

    // Even patch sides are rejected before any training happens.
    let out = rrfnn(
        dir,
        &["train", "--cube", "scene.hsc", "--labels", "scene.lbl", "--tws", "4"],
    );
    assert_code(&out, 1);
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    make_scene(dir);

    let out = rrfnn(
        dir,
        &["evaluate", "--cube", "missing.hsc", "--labels", "scene.lbl", "--model", "m.bin"],
    );
    assert_code(&out, 2);

    std::fs::write(dir.join("junk.bin"), b"not a model").unwrap();
    let out = rrfnn(
        dir,
        &["evaluate", "--cube", "scene.hsc", "--labels", "scene.lbl", "--model", "junk.bin"],
    );
    assert_code(&out, 2);

    // More training samples than the scene holds.
    let out = rrfnn(
        dir,
        &[
            "train", "--config", "scene.cfg", "--cube", "scene.hsc", "--labels", "scene.lbl",
            "--tws", "3", "--ts", "100000",
        ],
    );
    assert_code(&out, 2);
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    make_scene(dir);
    // A 1e150 init overflows the rank-sum into NaN within the first batch.
    let out = rrfnn(
        dir,
        &[
            "train", "--config", "scene.cfg", "--cube", "scene.hsc", "--labels", "scene.lbl",
            "--tws", "3", "--ts", "4", "--set", "init_scale=1e150",
        ],
    );
    assert_code(&out, 3);
    assert!(stderr(&out).contains("diverged"), "{}", stderr(&out));
}

#[test]
fn gradcheck_passes_and_help_is_not_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    let out = rrfnn(dir, &["gradcheck", "--trials", "5", "--seed", "3"]);
    assert_code(&out, 0);
    let text = stdout(&out);
    assert!(text.contains("max relative error"), "{text}");
    assert!(text.contains("PASS"), "{text}");

    let out = rrfnn(dir, &["--help"]);
    assert_code(&out, 0);
    assert!(stdout(&out).contains("grid"));
}
