//! Reference model: an in-memory map of files with POSIX-ish semantics, and
//! a random op generator that drives it and the device side by side.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::device::{Device, DeviceError, Fd, Trust};
use crate::minifs::layout::MAX_FILE_SIZE;
use crate::op::{OpenFlags, Whence};

#[derive(Default, Debug, Clone)]
pub struct RefFs {
    files: BTreeMap<String, Vec<u8>>,
    fds: HashMap<u32, (String, u64)>,
    next_fd: u32,
}

impl RefFs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn open(&mut self, path: &str, create: bool, trunc: bool) -> Option<u32> {
        if !self.files.contains_key(path) {
            if !create {
                return None;
            }
            self.files.insert(path.into(), Vec::new());
        }
        if trunc {
            self.files.get_mut(path).unwrap().clear();
        }
        let fd = self.next_fd;
        self.next_fd += 1;
        self.fds.insert(fd, (path.into(), 0));
        Some(fd)
    }

    pub fn write(&mut self, fd: u32, data: &[u8]) -> Option<usize> {
        let (path, pos) = self.fds.get_mut(&fd)?;
        let end = *pos + data.len() as u64;
        if end > MAX_FILE_SIZE {
            return None;
        }
        let f = self.files.get_mut(path.as_str()).unwrap();
        if f.len() < end as usize {
            f.resize(end as usize, 0);
        }
        f[*pos as usize..end as usize].copy_from_slice(data);
        *pos = end;
        Some(data.len())
    }

    pub fn read(&mut self, fd: u32, n: usize) -> Option<Vec<u8>> {
        let (path, pos) = self.fds.get_mut(&fd)?;
        let f = &self.files[path.as_str()];
        let start = (*pos as usize).min(f.len());
        let end = (start + n).min(f.len());
        *pos += (end - start) as u64;
        Some(f[start..end].to_vec())
    }

    pub fn lseek(&mut self, fd: u32, off: i64, whence: Whence) -> Option<u64> {
        let (path, pos) = self.fds.get_mut(&fd)?;
        let base = match whence {
            Whence::Set => 0,
            Whence::Cur => *pos as i64,
            Whence::End => self.files[path.as_str()].len() as i64,
        };
        let p = base.checked_add(off).filter(|p| *p >= 0)?;
        *pos = p as u64;
        Some(*pos)
    }

    pub fn size(&self, fd: u32) -> Option<u64> {
        let (path, _) = self.fds.get(&fd)?;
        Some(self.files[path.as_str()].len() as u64)
    }

    pub fn close(&mut self, fd: u32) -> bool {
        self.fds.remove(&fd).is_some()
    }

    pub fn file(&self, path: &str) -> Option<&[u8]> {
        self.files.get(path).map(|v| v.as_slice())
    }

    pub fn files(&self) -> impl Iterator<Item = (&str, &[u8])> {
        self.files.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

/// One step of a random session. Slot indices refer to open descriptors.
#[derive(Clone, Debug, PartialEq)]
pub enum Step {
    Create { name: usize, trunc: bool },
    Write { slot: usize, len: usize, seed: u64 },
    Read { slot: usize, len: usize },
    Lseek { slot: usize, offset: i64, whence: Whence },
    Fsync { slot: usize },
    Fstat { slot: usize },
}

pub const NAMES: usize = 6;

pub fn file_name(i: usize) -> String {
    format!("f{i}.dat")
}

/// Random step mix. Offsets stay inside the file size limit so most writes
/// succeed; lengths straddle page boundaries on purpose.
pub fn random_steps(rng: &mut impl Rng, n: usize) -> Vec<Step> {
    let mut out = Vec::with_capacity(n);
    let mut open = 0usize;
    for _ in 0..n {
        let roll: u32 = if open == 0 { 0 } else { rng.gen_range(0..100) };
        let slot = if open > 0 { rng.gen_range(0..open) } else { 0 };
        let s = match roll {
            0..=9 => {
                open += 1;
                Step::Create { name: rng.gen_range(0..NAMES), trunc: rng.gen_bool(0.15) }
            }
            10..=44 => {
                let len = match rng.gen_range(0..4) {
                    0 => rng.gen_range(1..=64),
                    1 => rng.gen_range(1..=4096),
                    2 => rng.gen_range(4000..=9000),
                    _ => rng.gen_range(1..=16384),
                };
                Step::Write { slot, len, seed: rng.gen() }
            }
            45..=69 => Step::Read { slot, len: rng.gen_range(1..=12000) },
            70..=84 => {
                let whence = [Whence::Set, Whence::Cur, Whence::End][rng.gen_range(0..3)];
                let offset = match whence {
                    Whence::Set => rng.gen_range(0..MAX_FILE_SIZE as i64 / 2),
                    Whence::Cur => rng.gen_range(-5000..5000),
                    Whence::End => rng.gen_range(-2000..100),
                };
                Step::Lseek { slot, offset, whence }
            }
            85..=94 => Step::Fsync { slot },
            _ => Step::Fstat { slot },
        };
        out.push(s);
    }
    out
}

pub fn payload(seed: u64, len: usize) -> Vec<u8> {
    use rand::{RngCore, SeedableRng};
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut v = vec![0u8; len];
    r.fill_bytes(&mut v);
    v
}

/// Runs one step on the device alone, without a model. Create pushes the
/// new descriptor onto `slots`.
pub fn apply_device_step(dev: &mut Device, slots: &mut Vec<Fd>, step: &Step) -> Result<(), DeviceError> {
    match *step {
        Step::Create { name, trunc } => {
            let flags = if trunc { OpenFlags::CREATE | OpenFlags::TRUNC } else { OpenFlags::CREATE };
            slots.push(dev.open(&file_name(name), flags)?);
        }
        Step::Write { slot, len, seed } => {
            dev.write(slots[slot], &payload(seed, len))?;
        }
        Step::Read { slot, len } => {
            dev.read(slots[slot], len)?;
        }
        Step::Lseek { slot, offset, whence } => {
            dev.lseek(slots[slot], offset, whence)?;
        }
        Step::Fsync { slot } => dev.fsync(slots[slot])?,
        Step::Fstat { slot } => {
            dev.fstat(slots[slot])?;
        }
    }
    Ok(())
}

/// Where device and model first disagreed.
#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub step: usize,
    pub what: String,
}

/// Runs `steps` through `dev` and the model, comparing every result.
/// `on_payload` sees each payload before it is written.
pub fn run_against_model(dev: &mut Device, steps: &[Step], mut on_payload: impl FnMut(&[u8])) -> Result<RefFs, Divergence> {
    let mut model = RefFs::new();
    let mut slots: Vec<(Fd, u32)> = Vec::new();
    let fail = |i: usize, what: String| Divergence { step: i, what };
    for (i, s) in steps.iter().enumerate() {
        match *s {
            Step::Create { name, trunc } => {
                let path = file_name(name);
                let mut flags = OpenFlags::CREATE;
                if trunc {
                    flags = flags | OpenFlags::TRUNC;
                }
                let fd = dev.open(&path, flags).map_err(|e| fail(i, format!("open: {e}")))?;
                let mfd = model.open(&path, true, trunc).unwrap();
                slots.push((fd, mfd));
            }
            Step::Write { slot, len, seed } => {
                let (fd, mfd) = slots[slot];
                let data = payload(seed, len);
                on_payload(&data);
                let want = model.write(mfd, &data);
                let got = dev.write(fd, &data);
                match (got, want) {
                    (Ok(n), Some(m)) if n == m => {}
                    (Err(DeviceError::Op(_)), None) => {}
                    (g, w) => return Err(fail(i, format!("write: device {g:?}, model {w:?}"))),
                }
            }
            Step::Read { slot, len } => {
                let (fd, mfd) = slots[slot];
                let want = model.read(mfd, len).unwrap();
                match dev.read(fd, len) {
                    Ok((got, Trust::Trusted)) if got == want => {}
                    Ok((got, t)) => {
                        return Err(fail(i, format!("read: {} bytes {t:?}, model {} bytes", got.len(), want.len())));
                    }
                    Err(e) => return Err(fail(i, format!("read: {e}"))),
                }
            }
            Step::Lseek { slot, offset, whence } => {
                let (fd, mfd) = slots[slot];
                let want = model.lseek(mfd, offset, whence);
                match (dev.lseek(fd, offset, whence), want) {
                    (Ok(p), Some(q)) if p == q => {}
                    (Err(DeviceError::Op(_)), None) => {}
                    (g, w) => return Err(fail(i, format!("lseek: device {g:?}, model {w:?}"))),
                }
            }
            Step::Fsync { slot } => {
                dev.fsync(slots[slot].0).map_err(|e| fail(i, format!("fsync: {e}")))?;
            }
            Step::Fstat { slot } => {
                let (fd, mfd) = slots[slot];
                let want = model.size(mfd).unwrap();
                match dev.fstat(fd) {
                    Ok(n) if n == want => {}
                    g => return Err(fail(i, format!("fstat: device {g:?}, model {want}"))),
                }
            }
        }
    }
    // Everything must read back after the session as well.
    dev.quiesce().map_err(|e| fail(steps.len(), format!("quiesce: {e}")))?;
    for (path, want) in model.files() {
        let fd = dev.open(path, OpenFlags::empty()).map_err(|e| fail(steps.len(), format!("reopen {path}: {e}")))?;
        let (got, _) = dev.read(fd, want.len() + 1).map_err(|e| fail(steps.len(), format!("read-back {path}: {e}")))?;
        if got != want {
            return Err(fail(steps.len(), format!("read-back {path}: {} vs {} bytes", got.len(), want.len())));
        }
        dev.close(fd).map_err(|e| fail(steps.len(), format!("close: {e}")))?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_semantics() {
        let mut m = RefFs::new();
        let fd = m.open("x", true, false).unwrap();
        assert_eq!(m.lseek(fd, 10, Whence::Set), Some(10));
        m.write(fd, b"ab").unwrap();
        assert_eq!(m.size(fd), Some(12));
        assert_eq!(m.lseek(fd, 0, Whence::Set), Some(0));
        let r = m.read(fd, 100).unwrap();
        assert_eq!(&r[..10], &[0; 10]);
        assert_eq!(&r[10..], b"ab");
        assert_eq!(m.lseek(fd, -1, Whence::Set), None);
        assert_eq!(m.lseek(fd, 0, Whence::End), Some(12));
        assert_eq!(m.write(fd, &vec![0; MAX_FILE_SIZE as usize]), None);
        assert!(m.open("y", false, false).is_none());
    }
}
