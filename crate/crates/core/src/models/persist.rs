//! Binary model files: a fixed header plus named `f64` blocks.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"GSRM1\n"
//! u32     format version (1)
//! u8      family code
//! u64     training seed
//! u64     config digest of the run that produced the model
//! u32     input feature columns
//! u32     epochs / steps / rounds run
//! f64     best validation loss (NaN when not tracked)
//! u32     block count
//! blocks  u32 name length, name bytes, u32 value count, f64 values
//! ```
//!
//! The config digest comes back to the caller on load so a stale cache can
//! be flagged; the file itself never stores wall-clock state.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::tree::{Node, Tree};
use crate::models::{
    ForestModel, GbdtModel, KnnModel, LogregModel, ModelFamily, ModelParams, NeuralModel,
    TrainedModel, TrainingMeta,
};
use crate::models::nn::{CnnParams, LstmParams, MlpParams, NeuralArch, NeuralNet};

const MAGIC: &[u8; 6] = b"GSRM1\n";
const FORMAT_VERSION: u32 = 1;

fn family_code(family: ModelFamily) -> u8 {
    match family {
        ModelFamily::Logreg => 1,
        ModelFamily::Knn => 2,
        ModelFamily::RandomForest => 3,
        ModelFamily::Gbdt => 4,
        ModelFamily::Mlp => 5,
        ModelFamily::Cnn => 6,
        ModelFamily::Lstm => 7,
    }
}

fn family_from_code(code: u8) -> Result<ModelFamily> {
    ModelFamily::all()
        .into_iter()
        .find(|&f| family_code(f) == code)
        .ok_or_else(|| Error::Parse(format!("unknown model family code {code}")))
}

pub fn save_model(path: &Path, model: &TrainedModel, config_digest: u64) -> Result<()> {
    let blocks = collect_blocks(model)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&[family_code(model.family)])?;
    w.write_all(&model.meta.seed.to_le_bytes())?;
    w.write_all(&config_digest.to_le_bytes())?;
    w.write_all(&(model.input_cols as u32).to_le_bytes())?;
    w.write_all(&(model.meta.epochs_run as u32).to_le_bytes())?;
    w.write_all(&model.meta.best_val_loss.unwrap_or(f64::NAN).to_le_bytes())?;
    w.write_all(&(blocks.len() as u32).to_le_bytes())?;
    for (name, values) in &blocks {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(values.len() as u32).to_le_bytes())?;
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a model back along with the config digest it was trained under.
pub fn load_model(path: &Path) -> Result<(TrainedModel, u64)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 6];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Parse("not a model file (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Parse(format!(
            "unsupported model format version {version}"
        )));
    }
    let family = family_from_code(read_u8(&mut r)?)?;
    let seed = read_u64(&mut r)?;
    let config_digest = read_u64(&mut r)?;
    let input_cols = read_u32(&mut r)? as usize;
    let epochs_run = read_u32(&mut r)? as usize;
    let best_val = read_f64(&mut r)?;
    let block_count = read_u32(&mut r)? as usize;

    let mut blocks = Vec::with_capacity(block_count);
    for _ in 0..block_count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        read_exact(&mut r, &mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Parse("block name is not utf-8".into()))?;
        let count = read_u32(&mut r)? as usize;
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            values.push(read_f64(&mut r)?);
        }
        blocks.push((name, values));
    }

    let meta = TrainingMeta {
        seed,
        epochs_run,
        best_val_loss: if best_val.is_nan() { None } else { Some(best_val) },
    };
    let params = assemble_params(family, input_cols, seed, blocks)?;
    Ok((
        TrainedModel {
            family,
            input_cols,
            params,
            meta,
        },
        config_digest,
    ))
}

fn collect_blocks(model: &TrainedModel) -> Result<Vec<(String, Vec<f64>)>> {
    let mut blocks: Vec<(String, Vec<f64>)> = Vec::new();
    match &model.params {
        ModelParams::Logreg(m) => {
            blocks.push(("weights".into(), m.weights.clone()));
            blocks.push(("bias".into(), vec![m.bias]));
        }
        ModelParams::Knn(m) => {
            blocks.push(("k".into(), vec![m.k as f64]));
            blocks.push(("train_x".into(), m.train_x.values.clone()));
            blocks.push(("train_y".into(), m.train_y.clone()));
        }
        ModelParams::Forest(m) => {
            blocks.push(("tree_count".into(), vec![m.trees.len() as f64]));
            for (t, tree) in m.trees.iter().enumerate() {
                blocks.push((format!("tree{t}"), tree_to_values(tree)));
            }
        }
        ModelParams::Gbdt(m) => {
            blocks.push(("init_score".into(), vec![m.init_score]));
            blocks.push(("tree_count".into(), vec![m.trees.len() as f64]));
            for (t, tree) in m.trees.iter().enumerate() {
                blocks.push((format!("tree{t}"), tree_to_values(tree)));
            }
        }
        ModelParams::Neural(m) => {
            blocks.push(("arch".into(), arch_to_values(&m.arch)));
            for b in 0..m.net.block_count() {
                blocks.push((m.net.block_name(b).to_string(), m.net.block(b).to_vec()));
            }
        }
    }
    Ok(blocks)
}

fn assemble_params(
    family: ModelFamily,
    input_cols: usize,
    seed: u64,
    mut blocks: Vec<(String, Vec<f64>)>,
) -> Result<ModelParams> {
    match family {
        ModelFamily::Logreg => {
            let weights = take(&mut blocks, "weights")?;
            let bias = scalar(take(&mut blocks, "bias")?)?;
            Ok(ModelParams::Logreg(LogregModel { weights, bias }))
        }
        ModelFamily::Knn => {
            let k = scalar(take(&mut blocks, "k")?)? as usize;
            let values = take(&mut blocks, "train_x")?;
            let train_y = take(&mut blocks, "train_y")?;
            if train_y.is_empty() || values.len() % train_y.len() != 0 {
                return Err(Error::Parse("knn blocks have inconsistent sizes".into()));
            }
            let rows = train_y.len();
            let cols = values.len() / rows;
            let train_x = crate::models::FeatureMatrix::new(rows, cols, values)?;
            Ok(ModelParams::Knn(KnnModel { k, train_x, train_y }))
        }
        ModelFamily::RandomForest => {
            let trees = take_trees(&mut blocks)?;
            Ok(ModelParams::Forest(ForestModel {
                trees,
                input_cols,
            }))
        }
        ModelFamily::Gbdt => {
            let init_score = scalar(take(&mut blocks, "init_score")?)?;
            let trees = take_trees(&mut blocks)?;
            Ok(ModelParams::Gbdt(GbdtModel { init_score, trees }))
        }
        ModelFamily::Mlp | ModelFamily::Cnn | ModelFamily::Lstm => {
            let arch = arch_from_values(family, &take(&mut blocks, "arch")?)?;
            let mut net = NeuralNet::for_arch(&arch, input_cols, seed)?;
            for b in 0..net.block_count() {
                let name = net.block_name(b).to_string();
                let values = take(&mut blocks, &name)?;
                if values.len() != net.block(b).len() {
                    return Err(Error::Parse(format!(
                        "block {name} has {} values, expected {}",
                        values.len(),
                        net.block(b).len()
                    )));
                }
                net.block_mut(b).copy_from_slice(&values);
            }
            Ok(ModelParams::Neural(NeuralModel { arch, net }))
        }
    }
}

fn take(blocks: &mut Vec<(String, Vec<f64>)>, name: &str) -> Result<Vec<f64>> {
    let at = blocks
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::Parse(format!("missing block {name:?}")))?;
    Ok(blocks.remove(at).1)
}

fn take_trees(blocks: &mut Vec<(String, Vec<f64>)>) -> Result<Vec<Tree>> {
    let count = scalar(take(blocks, "tree_count")?)? as usize;
    let mut trees = Vec::with_capacity(count);
    for t in 0..count {
        trees.push(tree_from_values(&take(blocks, &format!("tree{t}"))?)?);
    }
    Ok(trees)
}

fn scalar(values: Vec<f64>) -> Result<f64> {
    if values.len() != 1 {
        return Err(Error::Parse(format!(
            "expected a single value, got {}",
            values.len()
        )));
    }
    Ok(values[0])
}

/// Five values per node: a tag, then either (feature, threshold, left,
/// right) or (value, 0, 0, 0).
fn tree_to_values(tree: &Tree) -> Vec<f64> {
    let mut out = Vec::with_capacity(tree.nodes.len() * 5);
    for node in &tree.nodes {
        match *node {
            Node::Split {
                feature,
                threshold,
                left,
                right,
            } => out.extend([0.0, feature as f64, threshold, left as f64, right as f64]),
            Node::Leaf { value } => out.extend([1.0, value, 0.0, 0.0, 0.0]),
        }
    }
    out
}

fn tree_from_values(values: &[f64]) -> Result<Tree> {
    if values.len() % 5 != 0 || values.is_empty() {
        return Err(Error::Parse("malformed tree block".into()));
    }
    let mut nodes = Vec::with_capacity(values.len() / 5);
    for chunk in values.chunks_exact(5) {
        match chunk[0] {
            t if t == 0.0 => nodes.push(Node::Split {
                feature: chunk[1] as usize,
                threshold: chunk[2],
                left: chunk[3] as usize,
                right: chunk[4] as usize,
            }),
            t if t == 1.0 => nodes.push(Node::Leaf { value: chunk[1] }),
            t => return Err(Error::Parse(format!("unknown tree node tag {t}"))),
        }
    }
    Ok(Tree { nodes })
}

fn arch_to_values(arch: &NeuralArch) -> Vec<f64> {
    match *arch {
        NeuralArch::Mlp(p) => vec![0.0, p.hidden.0 as f64, p.hidden.1 as f64],
        NeuralArch::Cnn(p) => vec![
            1.0,
            p.channels.0 as f64,
            p.channels.1 as f64,
            p.kernel as f64,
        ],
        NeuralArch::Lstm(p) => vec![
            2.0,
            p.hidden as f64,
            p.head as f64,
            if p.relu_on_hidden { 1.0 } else { 0.0 },
        ],
    }
}

fn arch_from_values(family: ModelFamily, values: &[f64]) -> Result<NeuralArch> {
    let expect_tag = |tag: f64, len: usize| -> Result<()> {
        if values.len() != len || values[0] != tag {
            return Err(Error::Parse("malformed arch block".into()));
        }
        Ok(())
    };
    match family {
        ModelFamily::Mlp => {
            expect_tag(0.0, 3)?;
            Ok(NeuralArch::Mlp(MlpParams {
                hidden: (values[1] as usize, values[2] as usize),
            }))
        }
        ModelFamily::Cnn => {
            expect_tag(1.0, 4)?;
            Ok(NeuralArch::Cnn(CnnParams {
                channels: (values[1] as usize, values[2] as usize),
                kernel: values[3] as usize,
            }))
        }
        ModelFamily::Lstm => {
            expect_tag(2.0, 4)?;
            Ok(NeuralArch::Lstm(LstmParams {
                hidden: values[1] as usize,
                head: values[2] as usize,
                relu_on_hidden: values[3] != 0.0,
            }))
        }
        _ => Err(Error::Parse(format!(
            "family {} does not carry an arch block",
            family.key()
        ))),
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Parse("model file truncated".into()))
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{
        fit_gbdt, fit_knn, fit_logreg, fit_mlp, fit_random_forest, FeatureMatrix, ForestParams,
        GbdtParams, KnnParams, MlpParams, TrainConfig,
    };
    use crate::windowing::{ClassWeights, GlycemicLabel};

    fn fixture() -> (FeatureMatrix, Vec<GlycemicLabel>) {
        let values: Vec<f64> = (0..40)
            .map(|i| if i % 2 == 0 { 1.0 + 0.02 * i as f64 } else { -1.0 - 0.02 * i as f64 })
            .collect();
        let labels = (0..40)
            .map(|i| {
                if i % 2 == 0 {
                    GlycemicLabel::Hypo
                } else {
                    GlycemicLabel::Normo
                }
            })
            .collect();
        (FeatureMatrix::new(40, 1, values).unwrap(), labels)
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            max_epochs: 3,
            batch_size: 8,
            ..TrainConfig::with_seed_and_weights(21, ClassWeights::unit())
        }
    }

    fn round_trip(model: &TrainedModel) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_model(&path, model, 0xfeed).unwrap();
        let (loaded, digest) = load_model(&path).unwrap();
        assert_eq!(digest, 0xfeed);
        assert_eq!(&loaded, model);
    }

    #[test]
    fn logreg_round_trips() {
        let (x, y) = fixture();
        round_trip(&fit_logreg(&x, &y, &cfg()).unwrap());
    }

    #[test]
    fn knn_round_trips() {
        let (x, y) = fixture();
        round_trip(&fit_knn(&x, &y, &KnnParams::default()).unwrap());
    }

    #[test]
    fn forest_round_trips() {
        let (x, y) = fixture();
        let params = ForestParams {
            n_trees: 5,
            ..ForestParams::default()
        };
        round_trip(&fit_random_forest(&x, &y, &params, &cfg()).unwrap());
    }

    #[test]
    fn gbdt_round_trips() {
        let (x, y) = fixture();
        let params = GbdtParams {
            rounds: 6,
            ..GbdtParams::default()
        };
        round_trip(&fit_gbdt(&x, &y, &x, &y, &params, &cfg()).unwrap());
    }

    #[test]
    fn mlp_round_trips() {
        let (x, y) = fixture();
        let params = MlpParams { hidden: (4, 3) };
        round_trip(&fit_mlp(&x, &y, &x, &y, &params, &cfg()).unwrap());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        std::fs::write(&path, b"GSRZZ\nrest").unwrap();
        assert!(matches!(load_model(&path), Err(Error::Parse(_))));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let (x, y) = fixture();
        let model = fit_logreg(&x, &y, &cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_model(&path, &model, 1).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Parse(_))));
    }
}
