use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ble_lab::config::ScenarioConfig;
use ble_lab::harness;
use clap::{Parser, Subcommand};

use ble_lab_cli::server;

#[derive(Parser)]
#[command(name = "ble-lab", version, about = "Deterministic BLE security lab")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one seeded scenario and write its event log, journal and alerts.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Paired attack/clean runs over consecutive seeds; writes metrics.csv.
    Montecarlo {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        runs: usize,
        #[arg(long)]
        seed_base: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Risk assessment of the configured scenario.
    Assess {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Interactive control service over WebSocket and HTTP.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        port: u16,
        /// Virtual milliseconds per wall-clock millisecond.
        #[arg(long, default_value_t = 1.0)]
        time_scale: f64,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
    },
}

fn load(path: &Path) -> Result<ScenarioConfig, String> {
    ScenarioConfig::from_file(path).map_err(|e| format!("ConfigInvalid: {e}"))
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), String> {
    match cmd {
        Cmd::Run { config, seed, out } => {
            let mut cfg = load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let (world, result) = harness::run(&cfg, &out).map_err(|e| e.to_string())?;
            println!("artifacts: {}", result.dir.display());
            println!("frames: {}", world.medium.record_count());
            println!("heart-rate readings at the app: {}", world.phone.received.len());
            match world.session() {
                Some(s) => println!("session: {:?}, {} ops journaled", s.state, s.journal().count()),
                None => println!("session: none"),
            }
            if let Some(why) = world.attacker_failure() {
                println!("attacker failed: {why}");
            }
            println!("alerts: {}", result.alerts.len());
            Ok(())
        }
        Cmd::Montecarlo {
            config,
            runs,
            seed_base,
            out,
        } => {
            let cfg = load(&config)?;
            let (metrics, path) = harness::montecarlo(&cfg, runs, seed_base, &out).map_err(|e| e.to_string())?;
            print!("{}", metrics.to_csv());
            println!("written: {}", path.display());
            Ok(())
        }
        Cmd::Assess { config, out } => {
            let cfg = load(&config)?;
            let report = harness::assess(&cfg).map_err(|e| e.to_string())?;
            let dir = harness::write_report(&cfg, &report, &out).map_err(|e| e.to_string())?;
            print!("{}", report.to_text());
            println!("written: {}", dir.display());
            Ok(())
        }
        Cmd::Serve {
            config,
            port,
            time_scale,
            host,
        } => {
            let cfg = load(&config)?;
            let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
            runtime.block_on(async move {
                let addr = SocketAddr::new(host, port);
                let listener = tokio::net::TcpListener::bind(addr)
                    .await
                    .map_err(|e| format!("PortUnavailable: {addr}: {e}"))?;
                eprintln!("listening on {addr} (ws: /ws, http: /api/command, /api/devices)");
                server::serve(listener, cfg, time_scale).await
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serve_defaults() {
        let cli = Cli::try_parse_from(["ble-lab", "serve", "--config", "c.json", "--port", "8080"]).unwrap();
        let Cmd::Serve { time_scale, host, port, .. } = cli.command else {
            panic!("expected serve");
        };
        assert_eq!((time_scale, port), (1.0, 8080));
        assert_eq!(host.to_string(), "127.0.0.1");
    }

    #[test]
    fn montecarlo_needs_runs_and_seed_base() {
        assert!(Cli::try_parse_from(["ble-lab", "montecarlo", "--config", "c.json", "--runs", "5"]).is_err());
        assert!(Cli::try_parse_from(["ble-lab", "montecarlo", "--config", "c.json", "--runs", "5", "--seed-base", "9"]).is_ok());
    }

    #[test]
    fn bad_config_is_reported_by_kind() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 1, "bogus": true}"#).unwrap();
        let err = dispatch(Cmd::Assess { config: path, out: dir.path().into() }).unwrap_err();
        assert!(err.starts_with("ConfigInvalid: "), "{err}");
    }
}
