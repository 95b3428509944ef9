use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use harma::adapters::{attach_adapters, AdapterKind};
use harma::config::RunConfig;
use harma::datagen::{Corpus, RESERVED};
use harma::encoders::DualEncoder;
use serde::Serialize;

use crate::error::{CliError, CliResult};

/// Environment variable naming the default output root.
pub const RUN_DIR_ENV: &str = "HARMA_RUN_DIR";
pub const CONFIG_ECHO: &str = "config.txt";

/// Resolved configuration and paths for one command.
pub struct RunContext {
    pub config: RunConfig,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
}

impl RunContext {
    /// Loads the config file, applies `--seed` and `--set` overrides and validates.
    pub fn new(
        config_path: Option<&Path>,
        seed: Option<u64>,
        overrides: &[String],
        out_dir: PathBuf,
        checkpoint: Option<PathBuf>,
        data: Option<PathBuf>,
    ) -> CliResult<Self> {
        let mut config = match config_path {
            Some(p) => RunConfig::load(p).map_err(|e| CliError::Usage(e.to_string()))?,
            None => RunConfig::default(),
        };
        config.apply_overrides(overrides)?;
        if let Some(s) = seed {
            config.seed = s;
        }
        config.validate()?;
        Ok(Self {
            config,
            out_dir,
            checkpoint,
            data,
        })
    }

    pub fn prepare_out_dir(&self) -> CliResult<()> {
        fs::create_dir_all(&self.out_dir).map_err(|e| io_error(&self.out_dir, e))?;
        self.write_text(CONFIG_ECHO, &self.config.to_text())
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn write_text(&self, name: &str, text: &str) -> CliResult<()> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| io_error(&p, e))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write_text(name, &s)
    }

    pub fn append_lines(&self, name: &str, lines: &[String]) -> CliResult<()> {
        let p = self.path(name);
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&p)
            .map_err(|e| io_error(&p, e))?;
        for l in lines {
            writeln!(f, "{l}").map_err(|e| io_error(&p, e))?;
        }
        Ok(())
    }

    /// The corpus under `--data`, or the one generated in memory from the config seed.
    pub fn corpus(&self) -> CliResult<Corpus> {
        let c = &self.config;
        let corpus = match &self.data {
            Some(dir) => Corpus::load(dir, c.max_len)?,
            None => Corpus::in_memory(c.seed, c.split_counts(), c.image_size, c.max_len),
        };
        let needed = corpus.vocab.len() + RESERVED;
        if needed > c.vocab_size {
            return Err(CliError::Usage(format!(
                "corpus vocabulary needs {needed} token ids but vocab_size is {}",
                c.vocab_size
            )));
        }
        Ok(corpus)
    }

    pub fn require_checkpoint(&self, command: &str) -> CliResult<&Path> {
        let p = self
            .checkpoint
            .as_deref()
            .ok_or_else(|| CliError::Usage(format!("{command} needs --checkpoint PATH")))?;
        if !p.exists() {
            return Err(CliError::Usage(format!("checkpoint {} does not exist", p.display())));
        }
        Ok(p)
    }

    pub fn load_model(&self, path: &Path) -> CliResult<DualEncoder> {
        Ok(DualEncoder::load(path, self.config.model_config(), &self.config.adapter_config())?)
    }

    /// Attaches adapters from the config unless the model already carries some.
    pub fn ensure_adapters(&self, model: &mut DualEncoder) -> CliResult<()> {
        if !model.has_adapters() && self.config.adapter_kind != AdapterKind::None {
            attach_adapters(model, &self.config.adapter_config(), self.config.seed)?;
        }
        Ok(())
    }
}

pub fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}
