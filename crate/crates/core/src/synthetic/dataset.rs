//! On-disk layout of a generated dataset.
//!
//! ```text
//! <root>/manifest.txt            one line per sequence: name frames width height objects flow_noise
//! <root>/<name>/scene.json       scene parameters
//! <root>/<name>/frame_TTT.ppm    RGB frames
//! <root>/<name>/mask_TTT.pgm     object ids as pixel values
//! <root>/<name>/flow_TTT.flo     ground-truth flow from frame TTT−1 to TTT
//! <root>/<name>/noisy_TTT.flo    observed (noisy) flow, same convention
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use super::{Image, Sequence, SyntheticScene};
use crate::error::{CoreError, Result};
use crate::flow::{read_flo, write_flo};
use crate::image_io::{read_pgm, read_ppm, write_pgm, write_ppm};

pub const SCENE_FILE: &str = "scene.json";
pub const MANIFEST: &str = "manifest.txt";

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| CoreError::Format(format!("{}: {e}", path.display())))
}

pub fn write_sequence(dir: &Path, seq: &Sequence) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(SCENE_FILE), serde_json::to_string_pretty(&seq.scene)?)?;
    for (t, (img, mask)) in seq.frames.iter().zip(&seq.masks).enumerate() {
        let mut f = create(&dir.join(format!("frame_{t:03}.ppm")))?;
        write_ppm(&mut f, img.width, img.height, &img.rgb)?;
        f.flush()?;
        let mut f = create(&dir.join(format!("mask_{t:03}.pgm")))?;
        write_pgm(&mut f, img.width, img.height, mask)?;
        f.flush()?;
    }
    for (i, (gt, noisy)) in seq.flows.iter().zip(&seq.noisy_flows).enumerate() {
        let t = i + 1;
        let mut f = create(&dir.join(format!("flow_{t:03}.flo")))?;
        write_flo(&mut f, gt)?;
        f.flush()?;
        let mut f = create(&dir.join(format!("noisy_{t:03}.flo")))?;
        write_flo(&mut f, noisy)?;
        f.flush()?;
    }
    Ok(())
}

/// Reads a sequence written by [`write_sequence`]; flows are read back at
/// single precision.
pub fn read_sequence(dir: &Path) -> Result<Sequence> {
    let scene: SyntheticScene = serde_json::from_reader(open(&dir.join(SCENE_FILE))?)?;
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut seq = Sequence {
        name,
        scene: scene.clone(),
        frames: Vec::new(),
        masks: Vec::new(),
        flows: Vec::new(),
        noisy_flows: Vec::new(),
    };
    for t in 0..scene.frames {
        let (w, h, rgb) = read_ppm(&mut open(&dir.join(format!("frame_{t:03}.ppm")))?)?;
        let (mw, mh, mask) = read_pgm(&mut open(&dir.join(format!("mask_{t:03}.pgm")))?)?;
        if (w, h) != (scene.width, scene.height) || (mw, mh) != (w, h) {
            return Err(CoreError::Format(format!("frame {t} of {} has the wrong extents", dir.display())));
        }
        seq.frames.push(Image { width: w, height: h, rgb });
        seq.masks.push(mask);
        if t > 0 {
            seq.flows.push(read_flo(&mut open(&dir.join(format!("flow_{t:03}.flo")))?)?);
            seq.noisy_flows.push(read_flo(&mut open(&dir.join(format!("noisy_{t:03}.flo")))?)?);
        }
    }
    Ok(seq)
}

/// Writes every sequence under `root/<name>` plus the manifest.
pub fn write_dataset(root: &Path, sequences: &[Sequence]) -> Result<()> {
    fs::create_dir_all(root)?;
    let mut manifest = String::new();
    for seq in sequences {
        write_sequence(&root.join(&seq.name), seq)?;
        let s = &seq.scene;
        manifest.push_str(&format!(
            "{} {} {} {} {} {}\n",
            seq.name,
            s.frames,
            s.width,
            s.height,
            s.objects.len(),
            s.flow_noise
        ));
    }
    fs::write(root.join(MANIFEST), manifest)?;
    Ok(())
}

/// Sequence names listed in `root/manifest.txt`, in order.
pub fn list_sequences(root: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(root.join(MANIFEST))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_whitespace().next())
        .map(str::to_string)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_sequence, random_scene, Category};

    #[test]
    fn dataset_round_trip() {
        let seq = generate_sequence(&random_scene(Category::NoisyFlow, 4, 32, 32, 3), "noisy").unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), std::slice::from_ref(&seq)).unwrap();
        assert_eq!(list_sequences(dir.path()).unwrap(), vec!["noisy".to_string()]);
        let back = read_sequence(&dir.path().join("noisy")).unwrap();
        assert_eq!(back.frames, seq.frames);
        assert_eq!(back.masks, seq.masks);
        assert_eq!(back.flows, seq.flows);
        assert!(back.noisy_flows[0].tensor().max_abs_diff(seq.noisy_flows[0].tensor()).unwrap() < 1e-5);
    }
}
