//! Dataset indexing. Accepted layouts under the root:
//!
//! ```text
//! <identity>/<camera>/<sequence>/frame_0000.ppm ...
//! <identity>/<camera>/frame_0000.ppm ...          (one sequence per camera)
//! ```
//!
//! Files directly under the root (e.g. `placement.csv`) are ignored. Every
//! listing is sorted by name, so the index never depends on filesystem order.

use std::path::{Path, PathBuf};

use crate::data::ppm::image_read;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceRecord {
    pub identity: String,
    pub camera: String,
    /// Path relative to the root, `/`-separated.
    pub sequence: String,
    pub path: PathBuf,
    pub frames: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub records: Vec<SequenceRecord>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct identity names in sorted order.
    pub fn identities(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.records.iter().map(|r| r.identity.clone()).collect();
        ids.dedup();
        ids
    }

    /// Distinct camera names in sorted order.
    pub fn cameras(&self) -> Vec<String> {
        let mut cams: Vec<String> = self.records.iter().map(|r| r.camera.clone()).collect();
        cams.sort();
        cams.dedup();
        cams
    }

    pub fn find(&self, sequence: &str) -> Option<&SequenceRecord> {
        self.records.iter().find(|r| r.sequence == sequence)
    }
}

struct Listing {
    dirs: Vec<(String, PathBuf)>,
    files: Vec<(String, PathBuf)>,
}

fn list(dir: &Path) -> Result<Listing> {
    let mut dirs = Vec::new();
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let name = entry.file_name().into_string().map_err(|_| Error::Layout {
            path: path.clone(),
            msg: "name is not valid UTF-8".into(),
        })?;
        if name.starts_with('.') {
            continue;
        }
        if path.is_dir() {
            dirs.push((name, path));
        } else {
            files.push((name, path));
        }
    }
    dirs.sort();
    files.sort();
    Ok(Listing { dirs, files })
}

fn frame_number(name: &str) -> Option<usize> {
    let digits = name.strip_prefix("frame_")?.strip_suffix(".ppm")?;
    (digits.len() >= 4 && digits.bytes().all(|b| b.is_ascii_digit()))
        .then(|| digits.parse().ok())
        .flatten()
}

/// Frame count of a sequence directory; frames must be numbered `0..n`.
fn count_frames(dir: &Path, files: &[(String, PathBuf)]) -> Result<usize> {
    for (k, (name, path)) in files.iter().enumerate() {
        match frame_number(name) {
            Some(n) if n == k => {}
            Some(n) => {
                return Err(Error::Layout {
                    path: path.clone(),
                    msg: format!("frame index {n} where {k} was expected"),
                })
            }
            None => {
                return Err(Error::Layout {
                    path: path.clone(),
                    msg: "expected frame_NNNN.ppm".into(),
                })
            }
        }
    }
    if files.is_empty() {
        return Err(Error::Layout {
            path: dir.to_path_buf(),
            msg: "sequence has no frames".into(),
        });
    }
    Ok(files.len())
}

/// Indexes every sequence with at least `min_length` frames.
pub fn load_dataset(root: impl AsRef<Path>, min_length: usize) -> Result<DatasetIndex> {
    let root = root.as_ref();
    let mut records = Vec::new();
    for (identity, id_path) in list(root)?.dirs {
        let ids = list(&id_path)?;
        if let Some((_, p)) = ids.files.first() {
            return Err(Error::Layout {
                path: p.clone(),
                msg: "expected only camera directories inside an identity directory".into(),
            });
        }
        for (camera, cam_path) in ids.dirs {
            let cams = list(&cam_path)?;
            let mut push = |rel: String, path: PathBuf, frames: usize| {
                if frames >= min_length {
                    records.push(SequenceRecord {
                        identity: identity.clone(),
                        camera: camera.clone(),
                        sequence: rel,
                        path,
                        frames,
                    });
                }
            };
            match (cams.dirs.is_empty(), cams.files.is_empty()) {
                (true, false) => {
                    let n = count_frames(&cam_path, &cams.files)?;
                    push(format!("{identity}/{camera}"), cam_path.clone(), n);
                }
                (false, true) => {
                    for (seq, seq_path) in cams.dirs {
                        let s = list(&seq_path)?;
                        if let Some((_, p)) = s.dirs.first() {
                            return Err(Error::Layout {
                                path: p.clone(),
                                msg: "unexpected directory inside a sequence".into(),
                            });
                        }
                        let n = count_frames(&seq_path, &s.files)?;
                        push(format!("{identity}/{camera}/{seq}"), seq_path, n);
                    }
                }
                (true, true) => {
                    return Err(Error::Layout {
                        path: cam_path.clone(),
                        msg: "empty camera directory".into(),
                    })
                }
                (false, false) => {
                    return Err(Error::Layout {
                        path: cam_path.clone(),
                        msg: "camera directory mixes frames and sequence directories".into(),
                    })
                }
            }
        }
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        records,
    })
}

/// All frames of a sequence as `[T,H,W,3]`.
pub fn load_frames<F: Real>(record: &SequenceRecord) -> Result<Tensor<F>> {
    let frames = (0..record.frames)
        .map(|t| image_read(record.path.join(format!("frame_{t:04}.ppm"))))
        .collect::<Result<Vec<Tensor<F>>>>()?;
    let shape = frames[0].shape().to_vec();
    if let Some(t) = frames.iter().position(|f| f.shape() != shape.as_slice()) {
        return Err(Error::Layout {
            path: record.path.join(format!("frame_{t:04}.ppm")),
            msg: format!("frame size differs from the first frame's {shape:?}"),
        });
    }
    Tensor::stack_leading(&frames)
}
