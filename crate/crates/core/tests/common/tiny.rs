//! A three-class model trained for a couple of epochs, enough to exercise
//! every pipeline path in seconds. The training split has its annotation
//! file removed before training.

use std::fs;
use std::path::{Path, PathBuf};

use tempfile::TempDir;
use wsdl::config::RunConfig;
use wsdl::pipeline::{train_stagewise, EpochLog, TrainedModel};
use wsdl::synthdata::{generate_dataset, DatasetDir, RgbImage, Split, ANNOTATIONS_FILE};

pub const TINY: &str = "\
num_classes = 3
train_count = 24
test_count = 12
maen_epochs = 2
rpn_epochs = 1
head_epochs = 1
maen_batch = 12
rpn_batch = 12
head_batch = 12
";

pub struct TinyRun {
    _dir: TempDir,
    pub data: PathBuf,
    pub model: TrainedModel,
    pub logs: Vec<EpochLog>,
    pub accessed: Vec<PathBuf>,
}

pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_text(TINY, "tiny").unwrap();
    cfg
}

impl TinyRun {
    pub fn train() -> TinyRun {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let data = dir.path().join("data");
        generate_dataset(&cfg.gen, &data).unwrap();
        fs::remove_file(data.join(Split::Train.dir_name()).join(ANNOTATIONS_FILE)).unwrap();
        let train = DatasetDir::split(&data, Split::Train);
        let view = train.load_training_view().unwrap();
        let mut logs = Vec::new();
        let model = train_stagewise(&view, &cfg, &mut |l| logs.push(l.clone())).unwrap();
        TinyRun {
            _dir: dir,
            data,
            model,
            logs,
            accessed: train.accessed(),
        }
    }
}

pub fn test_images(data: &Path) -> Vec<RgbImage> {
    let view = DatasetDir::split(data, Split::Test).load_training_view().unwrap();
    view.samples.into_iter().map(|s| s.image).collect()
}
