//! `fit`: train an avatar on the reference and generated images of a manifest.

use std::fmt::Write as _;
use std::path::Path;

use super::files::{read_model_file, AvatarFile};
use super::generate::{Manifest, Provenance};
use super::{check_params, read_json, read_png, PipelineError};
use crate::avatar::fit::{fit_avatar, FitConfig, TrainingView};
use crate::avatar::loss::LossComponents;
use crate::morphable_model::{ExpressionParams, IdentityParams};
use crate::view_sampler::ExpressionDatabase;

pub const AVATAR_FILE: &str = "avatar.mavc";
pub const FIT_LOG_FILE: &str = "fit_log.csv";

pub struct FitOutput {
    pub avatar: AvatarFile,
    pub log: Vec<LossComponents>,
}

pub fn fit_log_csv(log: &[LossComponents]) -> String {
    let mut s = String::from(LossComponents::CSV_HEADER);
    s.push('\n');
    for (it, c) in log.iter().enumerate() {
        let _ = writeln!(s, "{}", c.csv_row(it));
    }
    s
}

/// Loads the training views a manifest describes, checking each image against
/// its camera and the model's parameter counts.
pub fn training_views(dir: &Path, manifest: &Manifest, k_id: usize, k_expr: usize) -> Result<Vec<TrainingView>, PipelineError> {
    if manifest.images.is_empty() {
        return Err(PipelineError::Manifest("no images listed".into()));
    }
    check_params("manifest beta", &manifest.beta, k_id).map_err(|e| PipelineError::Manifest(e.to_string()))?;
    manifest
        .images
        .iter()
        .map(|entry| {
            let image = read_png(&dir.join(&entry.file))?;
            let cam = &entry.camera;
            if image.shape() != (cam.height, cam.width, 3) {
                return Err(PipelineError::Manifest(format!(
                    "{}: image is {:?} but its camera is {}×{} RGB",
                    entry.file,
                    image.shape(),
                    cam.height,
                    cam.width
                )));
            }
            cam.validate().map_err(|e| PipelineError::Manifest(format!("{}: {e}", entry.file)))?;
            check_params("phi", &entry.phi, k_expr).map_err(|e| PipelineError::Manifest(format!("{}: {e}", entry.file)))?;
            Ok(TrainingView { image, camera: cam.clone(), phi: ExpressionParams(entry.phi.clone()) })
        })
        .collect()
}

/// Fits on every image of the manifest in `dir` (references and generated).
pub fn cmd_fit(config: &FitConfig, dir: &Path, out_dir: &Path) -> Result<FitOutput, PipelineError> {
    let manifest = Manifest::read(dir)?;
    let model = std::sync::Arc::new(read_model_file(&dir.join(&manifest.model_file))?);
    let views = training_views(dir, &manifest, model.k_id, model.k_expr)?;
    let expressions: Option<ExpressionDatabase> = Some(read_json(&dir.join(&manifest.expressions_file))?);
    log::info!(
        "fitting on {} reference and {} generated images",
        manifest.count(Provenance::Reference),
        manifest.count(Provenance::Generated)
    );
    let result = fit_avatar(model, IdentityParams(manifest.beta.clone()), &views, config)?;
    let avatar = AvatarFile { avatar: result.avatar, view: manifest.view.clone(), expressions };
    std::fs::create_dir_all(out_dir).map_err(|e| PipelineError::at(out_dir, e))?;
    avatar.write(&out_dir.join(AVATAR_FILE))?;
    let log_path = out_dir.join(FIT_LOG_FILE);
    std::fs::write(&log_path, fit_log_csv(&result.log)).map_err(|e| PipelineError::at(&log_path, e))?;
    Ok(FitOutput { avatar, log: result.log })
}
