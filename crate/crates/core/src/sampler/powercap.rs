//! Cumulative energy counters of the power-capping filesystem interface.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use super::SamplerError;

pub const DEFAULT_POWERCAP_ROOT: &str = "/sys/class/powercap";

/// Microjoules consumed between two readings of a counter that wraps to zero
/// after `max_range_uj`.
pub fn energy_delta_uj(previous: u64, current: u64, max_range_uj: u64) -> u64 {
    if current >= previous {
        current - previous
    } else {
        max_range_uj - previous + current + 1
    }
}

#[derive(Debug)]
struct Domain {
    energy_path: PathBuf,
    max_range_uj: u64,
    last_uj: u64,
}

impl Domain {
    fn open(zone: &Path) -> Result<Self, SamplerError> {
        let energy_path = zone.join("energy_uj");
        let max_range_uj = read_u64(&zone.join("max_energy_range_uj"))?;
        let last_uj = read_u64(&energy_path)?;
        Ok(Self {
            energy_path,
            max_range_uj,
            last_uj,
        })
    }

    fn advance(&mut self) -> Result<u64, SamplerError> {
        let now = read_u64(&self.energy_path)?;
        let d = energy_delta_uj(self.last_uj, now, self.max_range_uj);
        self.last_uj = now;
        Ok(d)
    }
}

fn read_u64(path: &Path) -> Result<u64, SamplerError> {
    let text = fs::read_to_string(path)
        .map_err(|e| SamplerError::EnergyInterface(format!("{}: {e}", path.display())))?;
    text.trim()
        .parse()
        .map_err(|_| SamplerError::EnergyInterface(format!("{}: not an integer: {}", path.display(), text.trim())))
}

/// Core (or, without core zones, package) and DRAM energy summed over all
/// packages.
#[derive(Debug)]
pub struct Powercap {
    core: Vec<Domain>,
    dram: Vec<Domain>,
    /// True when package zones stand in for missing core zones.
    pub core_is_package: bool,
}

impl Powercap {
    pub fn open(root: &Path) -> Result<Self, SamplerError> {
        let entries = fs::read_dir(root)
            .map_err(|e| SamplerError::EnergyInterface(format!("{}: {e}", root.display())))?;
        let mut zones = BTreeSet::new();
        for entry in entries.flatten() {
            let path = entry.path();
            if entry.file_name().to_string_lossy().starts_with("intel-rapl:") {
                zones.insert(fs::canonicalize(&path).unwrap_or(path.clone()));
                // subzones nest under their package on older kernels
                for sub in fs::read_dir(&path).into_iter().flatten().flatten() {
                    if sub.file_name().to_string_lossy().starts_with("intel-rapl:") {
                        zones.insert(fs::canonicalize(sub.path()).unwrap_or(sub.path()));
                    }
                }
            }
        }
        let (mut package, mut core, mut dram) = (Vec::new(), Vec::new(), Vec::new());
        for z in zones {
            let Ok(name) = fs::read_to_string(z.join("name")) else { continue };
            match name.trim() {
                n if n.starts_with("package") => package.push(z),
                "core" => core.push(z),
                "dram" => dram.push(z),
                _ => {}
            }
        }
        let core_is_package = core.is_empty();
        let core_zones = if core_is_package { package } else { core };
        if core_zones.is_empty() {
            return Err(SamplerError::EnergyInterface(format!(
                "{}: no core or package energy zones",
                root.display()
            )));
        }
        Ok(Self {
            core: core_zones.iter().map(|z| Domain::open(z)).collect::<Result<_, _>>()?,
            dram: dram.iter().map(|z| Domain::open(z)).collect::<Result<_, _>>()?,
            core_is_package,
        })
    }

    pub fn has_dram(&self) -> bool {
        !self.dram.is_empty()
    }

    /// `(core_watts, dram_watts)` averaged over the `dt_s` since the last call.
    pub fn read_watts(&mut self, dt_s: f64) -> Result<(f64, f64), SamplerError> {
        let sum = |ds: &mut Vec<Domain>| -> Result<f64, SamplerError> {
            let mut uj = 0u64;
            for d in ds.iter_mut() {
                uj += d.advance()?;
            }
            Ok(uj as f64 * 1e-6 / dt_s)
        };
        let core = sum(&mut self.core)?;
        let dram = sum(&mut self.dram)?;
        Ok((core, dram))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zone(dir: &Path, name: &str, energy: u64, max: u64) {
        fs::create_dir_all(dir).unwrap();
        fs::write(dir.join("name"), format!("{name}\n")).unwrap();
        fs::write(dir.join("energy_uj"), format!("{energy}\n")).unwrap();
        fs::write(dir.join("max_energy_range_uj"), format!("{max}\n")).unwrap();
    }

    #[test]
    fn wraparound_is_modular() {
        assert_eq!(energy_delta_uj(100, 350, 1000), 250);
        assert_eq!(energy_delta_uj(900, 49, 999), 149);
    }

    #[test]
    fn reads_core_and_dram() {
        let root = tempfile::tempdir().unwrap();
        let pkg = root.path().join("intel-rapl:0");
        zone(&pkg, "package-0", 0, 1_000_000_000);
        zone(&pkg.join("intel-rapl:0:0"), "core", 999_000_000, 999_999_999);
        zone(&pkg.join("intel-rapl:0:1"), "dram", 0, 1_000_000_000);
        let mut pc = Powercap::open(root.path()).unwrap();
        assert!(!pc.core_is_package && pc.has_dram());
        fs::write(pkg.join("intel-rapl:0:0/energy_uj"), "1000000\n").unwrap();
        fs::write(pkg.join("intel-rapl:0:1/energy_uj"), "500000\n").unwrap();
        let (core, dram) = pc.read_watts(0.5).unwrap();
        assert!((core - 4.0).abs() < 1e-9, "{core}");
        assert!((dram - 1.0).abs() < 1e-9);
    }

    #[test]
    fn package_stands_in_for_core() {
        let root = tempfile::tempdir().unwrap();
        zone(&root.path().join("intel-rapl:0"), "package-0", 10, 1000);
        let pc = Powercap::open(root.path()).unwrap();
        assert!(pc.core_is_package && !pc.has_dram());
    }

    #[test]
    fn missing_interface_is_an_error() {
        let root = tempfile::tempdir().unwrap();
        assert!(matches!(Powercap::open(root.path()), Err(SamplerError::EnergyInterface(_))));
        assert!(Powercap::open(&root.path().join("absent")).is_err());
    }
}
