mod common;

use common::*;

fn run(check: fn(&std::path::Path) -> Check) {
    let dir = tempfile::tempdir().unwrap();
    if let Err(e) = check(dir.path()) {
        panic!("{e}");
    }
}

#[test]
fn binary_pipeline_matches_library() {
    run(pipeline_matches_library);
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    run(unknown_key_is_a_config_error);
}

#[test]
fn cosmos_rejects_two_orientations() {
    run(cosmos_needs_three_orientations);
}

#[test]
fn mask_on_another_grid_exits_with_grid_code() {
    run(mask_grid_mismatch_is_a_grid_error);
}

#[test]
fn malformed_volumes_exit_with_file_code() {
    run(malformed_volume_is_a_file_error);
}

#[test]
fn bad_checkpoints_exit_with_state_code() {
    run(missing_checkpoint_is_a_state_error);
}

#[test]
fn smoke_training_resumes_and_reproduces() {
    run(smoke_train_resume_and_determinism);
}
