//! JSON-lines scenario files.
//!
//! The first line is a header carrying the schema version. Each scenario is
//! a `scenario` line with record counts followed by that many `lane`,
//! `crosswalk` and `agent` lines, in that order. Files are read as a stream,
//! one scenario at a time.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::config::Domain;
use crate::error::{CoreError, Result};
use crate::map::{Crosswalk, Lane, MapSource};
use crate::track::{AgentTrack, Scenario};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Record {
    Header {
        schema_version: u32,
    },
    Scenario {
        id: u64,
        domain: Domain,
        template: String,
        lanes: usize,
        crosswalks: usize,
        agents: usize,
    },
    Lane(Lane),
    Crosswalk(Crosswalk),
    Agent(AgentTrack),
}

impl Record {
    fn kind(&self) -> &'static str {
        match self {
            Record::Header { .. } => "header",
            Record::Scenario { .. } => "scenario",
            Record::Lane(_) => "lane",
            Record::Crosswalk(_) => "crosswalk",
            Record::Agent(_) => "agent",
        }
    }
}

pub struct ScenarioWriter<W: Write> {
    out: W,
}

impl<W: Write> ScenarioWriter<W> {
    pub fn new(mut out: W) -> Result<Self> {
        write_record(
            &mut out,
            &Record::Header {
                schema_version: SCHEMA_VERSION,
            },
        )?;
        Ok(Self { out })
    }

    pub fn write(&mut self, sc: &Scenario) -> Result<()> {
        write_record(
            &mut self.out,
            &Record::Scenario {
                id: sc.id,
                domain: sc.domain,
                template: sc.template.clone(),
                lanes: sc.map.lanes.len(),
                crosswalks: sc.map.crosswalks.len(),
                agents: sc.agents.len(),
            },
        )?;
        // records own their payload, so clone per line
        for l in &sc.map.lanes {
            write_record(&mut self.out, &Record::Lane(l.clone()))?;
        }
        for c in &sc.map.crosswalks {
            write_record(&mut self.out, &Record::Crosswalk(c.clone()))?;
        }
        for a in &sc.agents {
            write_record(&mut self.out, &Record::Agent(a.clone()))?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

fn write_record<W: Write>(out: &mut W, r: &Record) -> Result<()> {
    serde_json::to_writer(&mut *out, r)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn write_scenarios<W: Write>(out: W, scenarios: &[Scenario]) -> Result<W> {
    let mut w = ScenarioWriter::new(out)?;
    for s in scenarios {
        w.write(s)?;
    }
    w.finish()
}

/// Streaming reader yielding one scenario at a time.
pub struct ScenarioReader<R: BufRead> {
    input: R,
    line: usize,
    buf: String,
    failed: bool,
}

impl<R: BufRead> ScenarioReader<R> {
    /// Reads and checks the header line.
    pub fn new(input: R) -> Result<Self> {
        let mut r = Self {
            input,
            line: 0,
            buf: String::new(),
            failed: false,
        };
        match r.next_record()? {
            Some(Record::Header { schema_version }) if schema_version == SCHEMA_VERSION => Ok(r),
            Some(Record::Header { schema_version }) => Err(CoreError::SchemaVersion {
                found: schema_version,
                expected: SCHEMA_VERSION,
            }),
            Some(other) => Err(r.error(format!("expected header, found {} record", other.kind()))),
            None => Err(r.error("missing header".into())),
        }
    }

    fn error(&self, message: String) -> CoreError {
        CoreError::Parse {
            line: self.line,
            message,
        }
    }

    fn next_record(&mut self) -> Result<Option<Record>> {
        loop {
            self.buf.clear();
            if self.input.read_line(&mut self.buf)? == 0 {
                return Ok(None);
            }
            self.line += 1;
            let text = self.buf.trim();
            if text.is_empty() {
                continue;
            }
            return serde_json::from_str(text)
                .map(Some)
                .map_err(|e| self.error(e.to_string()));
        }
    }

    fn expect_record(&mut self, what: &str) -> Result<Record> {
        match self.next_record()? {
            Some(r) if r.kind() == what => Ok(r),
            Some(r) => Err(self.error(format!("expected {what} record, found {}", r.kind()))),
            None => {
                self.line += 1;
                Err(self.error(format!("unexpected end of file, expected {what} record")))
            }
        }
    }

    fn read_scenario(&mut self) -> Result<Option<Scenario>> {
        let (id, domain, template, nl, nc, na) = match self.next_record()? {
            None => return Ok(None),
            Some(Record::Scenario {
                id,
                domain,
                template,
                lanes,
                crosswalks,
                agents,
            }) => (id, domain, template, lanes, crosswalks, agents),
            Some(r) => return Err(self.error(format!("expected scenario record, found {}", r.kind()))),
        };
        let start = self.line;
        let mut map = MapSource::default();
        for _ in 0..nl {
            if let Record::Lane(l) = self.expect_record("lane")? {
                map.lanes.push(l);
            }
        }
        for _ in 0..nc {
            if let Record::Crosswalk(c) = self.expect_record("crosswalk")? {
                map.crosswalks.push(c);
            }
        }
        let mut agents = Vec::with_capacity(na);
        for _ in 0..na {
            if let Record::Agent(a) = self.expect_record("agent")? {
                agents.push(a);
            }
        }
        let sc = Scenario {
            id,
            domain,
            template,
            map,
            agents,
        };
        sc.validate().map_err(|e| CoreError::Parse {
            line: start,
            message: format!("scenario {id}: {e}"),
        })?;
        Ok(Some(sc))
    }
}

impl<R: BufRead> Iterator for ScenarioReader<R> {
    type Item = Result<Scenario>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let r = self.read_scenario().transpose();
        if matches!(r, Some(Err(_))) {
            self.failed = true;
        }
        r
    }
}

pub fn read_scenarios<R: BufRead>(input: R) -> Result<Vec<Scenario>> {
    ScenarioReader::new(input)?.collect()
}

pub fn load_scenarios(path: &std::path::Path) -> Result<Vec<Scenario>> {
    read_scenarios(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn save_scenarios(path: &std::path::Path, scenarios: &[Scenario]) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_scenarios(f, scenarios)?;
    Ok(())
}
