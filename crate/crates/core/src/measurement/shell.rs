use std::fs::{self, File};
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use wait_timeout::ChildExt;

use super::{BuildResult, DatasetDescriptor, MeasureError, Profiler, Result, RunSample, SpeciesDescriptor, StateVector, Toolchain};
use crate::flagspace::ChoiceVector;

/// Single-quote `s` for `sh -c`.
pub(crate) fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

/// Runs species command templates through `sh -c`.
pub struct ShellToolchain {
    cc: String,
    version: String,
    profiler: Option<Box<dyn Profiler>>,
}

impl std::fmt::Debug for ShellToolchain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ShellToolchain")
            .field("cc", &self.cc)
            .field("version", &self.version)
            .field("profiler", &self.profiler.is_some())
            .finish()
    }
}

impl ShellToolchain {
    /// Probe `cc --version`; the compiler is substituted for `{CC}` in build templates.
    pub fn detect(cc: &str) -> Result<Self> {
        let out = Command::new(cc)
            .arg("--version")
            .stdin(Stdio::null())
            .output()
            .map_err(|e| MeasureError::ToolchainMissing(format!("{cc}: {e}")))?;
        if !out.status.success() {
            return Err(MeasureError::ToolchainMissing(format!("{cc} --version failed")));
        }
        let version = String::from_utf8_lossy(&out.stdout)
            .lines()
            .next()
            .unwrap_or("")
            .trim()
            .to_string();
        Ok(ShellToolchain {
            cc: cc.to_string(),
            version,
            profiler: None,
        })
    }

    pub fn with_profiler(mut self, profiler: Box<dyn Profiler>) -> Self {
        self.profiler = Some(profiler);
        self
    }

    fn spawn(cmd: &str, cwd: &Path, log: &Path, timeout: Duration) -> Result<(Option<std::process::ExitStatus>, f64)> {
        let log_file = File::create(log)?;
        let start = Instant::now();
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(cmd)
            .current_dir(cwd)
            .stdin(Stdio::null())
            .stdout(Stdio::from(log_file.try_clone()?))
            .stderr(Stdio::from(log_file))
            .spawn()?;
        let status = child.wait_timeout(timeout)?;
        let elapsed = start.elapsed().as_secs_f64();
        if status.is_none() {
            let _ = child.kill();
            let _ = child.wait();
        }
        Ok((status, elapsed))
    }
}

fn children_max_rss() -> u64 {
    // SAFETY: getrusage only writes into the provided struct.
    unsafe {
        let mut usage: libc::rusage = std::mem::zeroed();
        if libc::getrusage(libc::RUSAGE_CHILDREN, &mut usage) == 0 {
            // ru_maxrss is in KiB on Linux; this is the peak over all reaped children.
            (usage.ru_maxrss.max(0) as u64) * 1024
        } else {
            0
        }
    }
}

impl Toolchain for ShellToolchain {
    fn name(&self) -> String {
        self.cc.clone()
    }

    fn version(&self) -> String {
        self.version.clone()
    }

    fn build(
        &self,
        species: &SpeciesDescriptor,
        choice: &ChoiceVector,
        flags: &str,
        scratch: &Path,
        timeout: Duration,
    ) -> Result<BuildResult> {
        let out = scratch.join("species.bin");
        let _ = fs::remove_file(&out);
        let sources: Vec<String> = species
            .sources
            .iter()
            .map(|s| shell_quote(&species.dir.join(s).to_string_lossy()))
            .collect();
        let cmd = species
            .build_template
            .replace("{CC}", &self.cc)
            .replace("{FLAGS}", flags)
            .replace("{SRC}", &sources.join(" "))
            .replace("{OUT}", &shell_quote(&out.to_string_lossy()));
        let log_path = scratch.join("build.log");
        let (status, elapsed) = Self::spawn(&cmd, &species.dir, &log_path, timeout)?;
        let Some(status) = status else {
            return Err(MeasureError::BuildTimeout(timeout));
        };
        let mut log = fs::read_to_string(&log_path).unwrap_or_default();
        let ok = status.success() && out.is_file();
        if !status.success() {
            log.push_str(&format!("\n[build exited with {status}]"));
        }
        let binary_size_bytes = if ok { fs::metadata(&out)?.len() } else { 0 };
        Ok(BuildResult {
            ok,
            compile_time_s: elapsed,
            binary_size_bytes,
            log,
            artifact: ok.then_some(out),
            choice: choice.clone(),
        })
    }

    fn run_once(
        &self,
        species: &SpeciesDescriptor,
        build: &BuildResult,
        dataset: &DatasetDescriptor,
        _state: &StateVector,
        scratch: &Path,
        timeout: Duration,
    ) -> Result<RunSample> {
        let bin = build
            .artifact
            .as_ref()
            .ok_or_else(|| MeasureError::InvalidSpecies("run without a built artifact".into()))?;
        let out = scratch.join("run.out");
        let _ = fs::remove_file(&out);
        let dataset_path = dataset
            .path
            .as_ref()
            .map(|p| p.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut cmd = species
            .run_template
            .replace("{BIN}", &shell_quote(&bin.to_string_lossy()))
            .replace("{DATASET}", &shell_quote(&dataset_path))
            .replace("{OUT}", &shell_quote(&out.to_string_lossy()));
        let counters_path = scratch.join("counters.csv");
        if let Some(p) = &self.profiler {
            cmd = p.wrap(&cmd, &counters_path);
        }
        let log_path = scratch.join("run.log");
        let (status, seconds) = Self::spawn(&cmd, &species.dir, &log_path, timeout)?;
        let counters = match (&self.profiler, status) {
            (Some(p), Some(_)) => Some(p.collect(&counters_path)?),
            _ => None,
        };
        Ok(RunSample {
            seconds,
            exit_ok: status.is_some_and(|s| s.success()),
            timed_out: status.is_none(),
            max_rss_bytes: children_max_rss(),
            counters,
            output: Some(out),
            valid: None,
            log: fs::read_to_string(&log_path).unwrap_or_default(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{build, run, MeasureOptions, Validation};
    use super::*;
    use crate::flagspace::{FlagSetting, FlagSpace};
    use std::collections::BTreeMap;

    const ECHO: &str = r#"#include <stdio.h>
int main(int argc, char **argv) {
    FILE *in = fopen(argv[1], "rb"), *out = fopen(argv[2], "wb");
    int c;
    if (!in || !out) return 1;
    while ((c = fgetc(in)) != EOF) fputc(c, out);
    return 0;
}
"#;

    fn species(dir: &Path) -> SpeciesDescriptor {
        fs::write(dir.join("echo.c"), ECHO).unwrap();
        fs::write(dir.join("ref.out"), b"hello").unwrap();
        SpeciesDescriptor {
            id: None,
            dir: dir.to_path_buf(),
            sources: vec!["echo.c".into()],
            build_template: "{CC} {FLAGS} -o {OUT} {SRC}".into(),
            run_template: "{BIN} {DATASET} {OUT}".into(),
            validate: Validation::ByteCompareReference,
            reference_outputs: [("ds".to_string(), "ref.out".to_string())].into_iter().collect(),
            tags: vec![],
            mock: None,
        }
    }

    fn space() -> FlagSpace {
        FlagSpace {
            compiler: "gcc".into(),
            version: "x".into(),
            base_levels: vec!["-O0".into(), "-O3".into()],
            booleans: vec!["no-such-optimization-flag".into()],
            params: BTreeMap::new(),
        }
    }

    fn dataset(dir: &Path, contents: &[u8]) -> DatasetDescriptor {
        let path = dir.join("input.txt");
        fs::write(&path, contents).unwrap();
        DatasetDescriptor {
            path: Some(path),
            ..DatasetDescriptor::named("ds")
        }
    }

    fn cc() -> Option<ShellToolchain> {
        ShellToolchain::detect("cc").ok()
    }

    #[test]
    fn missing_toolchain() {
        assert!(matches!(
            ShellToolchain::detect("definitely-not-a-compiler-xyz"),
            Err(MeasureError::ToolchainMissing(_))
        ));
    }

    #[test]
    fn real_build_run_and_validate() {
        let Some(tc) = cc() else { return };
        let dir = tempfile::tempdir().unwrap();
        let sp = species(dir.path());
        let scratch = dir.path().join("scratch");
        let opts = MeasureOptions::default();
        let b = build(&tc, &sp, &ChoiceVector::base("-O3"), &space(), &scratch, &opts).unwrap();
        assert!(b.ok, "{}", b.log);
        assert!(b.binary_size_bytes > 0);

        let ok = run(&tc, &sp, &b, &dataset(dir.path(), b"hello"), 5, &StateVector::for_platform("p"), &scratch, &scratch, &opts)
            .unwrap();
        assert!(!ok.failed, "{:?}", ok.log);
        assert_eq!(ok.samples.as_ref().unwrap().len(), 5);
        let s = ok.summary.as_ref().unwrap();
        assert_eq!(s.reliable, s.variation < 0.03);

        let bad = run(&tc, &sp, &b, &dataset(dir.path(), b"other"), 1, &StateVector::for_platform("p"), &scratch, &scratch, &opts)
            .unwrap();
        assert!(bad.failed);
    }

    #[test]
    fn real_build_malformed_flag() {
        let Some(tc) = cc() else { return };
        let dir = tempfile::tempdir().unwrap();
        let sp = species(dir.path());
        let choice = ChoiceVector::base("-O3").with("no-such-optimization-flag", FlagSetting::On);
        let b = build(&tc, &sp, &choice, &space(), &dir.path().join("s"), &MeasureOptions::default()).unwrap();
        assert!(!b.ok);
        assert!(b.log.contains("exited"));
    }

    #[test]
    fn run_timeout_marks_failure() {
        let Some(tc) = cc() else { return };
        let dir = tempfile::tempdir().unwrap();
        let mut sp = species(dir.path());
        sp.run_template = "sleep 5; {BIN} {DATASET} {OUT}".into();
        let scratch = dir.path().join("s");
        let opts = MeasureOptions {
            run_timeout: Duration::from_millis(200),
            ..Default::default()
        };
        let b = build(&tc, &sp, &ChoiceVector::base("-O0"), &space(), &scratch, &opts).unwrap();
        let r = run(&tc, &sp, &b, &dataset(dir.path(), b"hello"), 1, &StateVector::for_platform("p"), &scratch, &scratch, &opts)
            .unwrap();
        assert!(r.failed);
        assert!(r.log.unwrap().contains("exceeded"));
    }

    #[test]
    fn build_timeout_is_an_error() {
        let Some(tc) = cc() else { return };
        let dir = tempfile::tempdir().unwrap();
        let mut sp = species(dir.path());
        sp.build_template = "sleep 5; {CC} {FLAGS} -o {OUT} {SRC}".into();
        let opts = MeasureOptions {
            build_timeout: Duration::from_millis(200),
            ..Default::default()
        };
        let r = build(&tc, &sp, &ChoiceVector::base("-O0"), &space(), &dir.path().join("s"), &opts);
        assert!(matches!(r, Err(MeasureError::BuildTimeout(_))));
    }

    #[test]
    fn quoting() {
        assert_eq!(shell_quote("a b"), "'a b'");
        assert_eq!(shell_quote("it's"), r"'it'\''s'");
    }
}
