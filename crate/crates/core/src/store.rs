//! On-disk tapes and transcripts.
//!
//! Both formats start with a big-endian header and hold field elements as
//! fixed-width little-endian byte strings, so any element or round record
//! can be reached with one seek.
//!
//! Tape file:
//!
//! ```text
//! "RBCT" | version u16 | bits u16 | tail (n/8 bytes) | role u8 | count u64
//!        | provenance u8 (0 entropy, 1 seeded) | seed u64 | count * element
//! ```
//!
//! Transcript file:
//!
//! ```text
//! "RBCX" | version u16 | plan hash [32] | bits u16 | tail (n/8 bytes)
//!        | rounds planned u64 | scale u64 | deadline 1 u64 | deadline 2 u64
//!        | record count u64
//! record: k u64 | station u8 | x | y | issued u64 | received u64
//! trailer: reveal present u8 | bit u8 | a_m | reveal received u64
//!        | status u8 (0 complete, 1 aborted) | abort reason u8 | abort round u64
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, ErrorKind, Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::field::{batch_invert, random_element, FieldElement, FieldError, FieldSpec};
use crate::planner::ProtocolPlan;
use crate::protocol::{
    alice_commit_answer, alice_sustain_answer, check_record, opens_to, step_back, AbortReason, CommitBit,
    ProtocolError, RejectReason, Reveal, RoundRecord, Station, Tape, TapeRole, TimingPolicy, Transcript,
    TranscriptStatus, Verdict,
};

pub const TAPE_MAGIC: [u8; 4] = *b"RBCT";
pub const TRANSCRIPT_MAGIC: [u8; 4] = *b"RBCX";
pub const FORMAT_VERSION: u16 = 1;

/// Records per chunk in the streaming verifier.
pub const VERIFY_CHUNK: usize = 4096;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a {expected} file (bad magic)")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("file ends inside element {index}")]
    ShortRead { index: u64 },
    #[error("transcript belongs to plan {found}, expected {expected}")]
    PlanMismatch { expected: String, found: String },
    #[error("transcript record {index}: {detail}")]
    CorruptRecord { index: u64, detail: String },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// Where a tape's randomness came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TapeSource {
    Entropy,
    Seeded(u64),
}

impl TapeSource {
    fn encode(self) -> (u8, u64) {
        match self {
            TapeSource::Entropy => (0, 0),
            TapeSource::Seeded(seed) => (1, seed),
        }
    }

    fn decode(kind: u8, seed: u64) -> Option<Self> {
        match kind {
            0 => Some(TapeSource::Entropy),
            1 => Some(TapeSource::Seeded(seed)),
            _ => None,
        }
    }
}

/// Deterministic generator for seeded tapes: ChaCha20 keyed with
/// SHA-256("relbc-tape-v1" || role code || seed as u64 BE). The elements are
/// drawn by [`random_element`], so output is stable across platforms.
pub fn seeded_rng(role: TapeRole, seed: u64) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(b"relbc-tape-v1");
    h.update([role.code()]);
    h.update(seed.to_be_bytes());
    ChaCha20Rng::from_seed(h.finalize().into())
}

/// Element stream for one tape.
pub struct TapeElements {
    role: TapeRole,
    spec: Arc<FieldSpec>,
    rng: ChaCha20Rng,
}

impl TapeElements {
    pub fn new(role: TapeRole, spec: &Arc<FieldSpec>, source: TapeSource) -> Self {
        let rng = match source {
            TapeSource::Seeded(seed) => seeded_rng(role, seed),
            TapeSource::Entropy => ChaCha20Rng::from_seed(rand::rng().random()),
        };
        TapeElements { role, spec: Arc::clone(spec), rng }
    }

    pub fn next_element(&mut self) -> FieldElement {
        random_element(&mut self.rng, &self.spec, self.role == TapeRole::BobChallenges)
    }
}

/// Both tapes hold one element per round before the reveal: Alice's
/// secrets a_1..a_m and Bob's challenges x_1..x_m (odd indices used at
/// station 1, even at station 2).
pub fn tape_len(plan: &ProtocolPlan, _role: TapeRole) -> u64 {
    plan.rounds
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TapeSizing {
    pub element_bytes: u64,
    pub secrets_bytes: u64,
    pub challenges_bytes: u64,
    /// Bytes exchanged over the run, challenges plus answers, including the
    /// reveal round.
    pub protocol_bytes: u64,
}

impl TapeSizing {
    pub fn tapes_total(&self) -> u64 {
        self.secrets_bytes + self.challenges_bytes
    }
}

pub fn tape_sizing(plan: &ProtocolPlan) -> TapeSizing {
    let element_bytes = (plan.config.bits as u64).div_ceil(8);
    TapeSizing {
        element_bytes,
        secrets_bytes: tape_len(plan, TapeRole::AliceSecrets) * element_bytes,
        challenges_bytes: tape_len(plan, TapeRole::BobChallenges) * element_bytes,
        protocol_bytes: (plan.rounds + 1) * 2 * element_bytes,
    }
}

/// Parsed tape header.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TapeHeader {
    pub spec: Arc<FieldSpec>,
    pub role: TapeRole,
    pub count: u64,
    pub source: TapeSource,
}

impl TapeHeader {
    fn encoded_len(spec: &FieldSpec) -> u64 {
        4 + 2 + 2 + spec.byte_len() as u64 + 1 + 8 + 1 + 8
    }

    fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&TAPE_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_be_bytes())?;
        w.write_all(&(self.spec.bits() as u16).to_be_bytes())?;
        w.write_all(&self.spec.tail_bytes())?;
        w.write_all(&[self.role.code()])?;
        w.write_all(&self.count.to_be_bytes())?;
        let (kind, seed) = self.source.encode();
        w.write_all(&[kind])?;
        w.write_all(&seed.to_be_bytes())
    }

    fn read_from<R: Read>(r: &mut R) -> Result<Self, StoreError> {
        check_magic(r, TAPE_MAGIC, "tape")?;
        let spec = read_spec(r)?;
        let role_code = read_u8(r)?;
        let role = TapeRole::from_code(role_code)
            .ok_or_else(|| StoreError::CorruptHeader(format!("unknown tape role {role_code}")))?;
        let count = read_u64(r)?;
        let kind = read_u8(r)?;
        let seed = read_u64(r)?;
        let source = TapeSource::decode(kind, seed)
            .ok_or_else(|| StoreError::CorruptHeader(format!("unknown provenance {kind}")))?;
        Ok(TapeHeader { spec, role, count, source })
    }
}

/// Writes a tape of `count` elements drawn from `source`.
pub fn write_tape_file(
    path: &Path,
    spec: &Arc<FieldSpec>,
    role: TapeRole,
    count: u64,
    source: TapeSource,
) -> Result<TapeHeader, StoreError> {
    let header = TapeHeader { spec: Arc::clone(spec), role, count, source };
    let mut w = BufWriter::new(File::create(path)?);
    header.write_to(&mut w)?;
    let mut elements = TapeElements::new(role, spec, source);
    let mut buf = vec![0u8; spec.byte_len()];
    for _ in 0..count {
        elements.next_element().write_bytes(&mut buf);
        w.write_all(&buf)?;
    }
    w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    Ok(header)
}

/// Generates the tape `role` needs for `plan`.
pub fn generate_tape(
    plan: &ProtocolPlan,
    role: TapeRole,
    source: TapeSource,
    path: &Path,
) -> Result<TapeHeader, StoreError> {
    let spec = plan.field_spec().map_err(|e| StoreError::CorruptHeader(e.to_string()))?;
    write_tape_file(path, &spec, role, tape_len(plan, role), source)
}

/// Writes an in-memory tape (provenance recorded as entropy).
pub fn write_tape(path: &Path, tape: &Tape) -> Result<(), StoreError> {
    let header = TapeHeader {
        spec: Arc::clone(tape.spec()),
        role: tape.role(),
        count: tape.len(),
        source: TapeSource::Entropy,
    };
    let mut w = BufWriter::new(File::create(path)?);
    header.write_to(&mut w)?;
    let mut buf = vec![0u8; tape.spec().byte_len()];
    for e in tape.elements() {
        e.write_bytes(&mut buf);
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

/// Sequential cursor over a tape file. Memory use does not depend on the
/// tape length.
pub struct TapeReader {
    header: TapeHeader,
    reader: BufReader<File>,
    body_offset: u64,
    /// 1-based index of the next element.
    next: u64,
    buf: Vec<u8>,
}

impl TapeReader {
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let mut reader = BufReader::new(File::open(path)?);
        let header = TapeHeader::read_from(&mut reader)?;
        let body_offset = TapeHeader::encoded_len(&header.spec);
        let buf = vec![0u8; header.spec.byte_len()];
        Ok(TapeReader { header, reader, body_offset, next: 1, buf })
    }

    pub fn header(&self) -> &TapeHeader {
        &self.header
    }

    /// 1-based index of the element the next read returns.
    pub fn position(&self) -> u64 {
        self.next
    }

    /// Positions the cursor so the next read returns element `index`
    /// (1-based). `count + 1` positions at the end.
    pub fn seek_to(&mut self, index: u64) -> Result<(), StoreError> {
        if index == 0 || index > self.header.count + 1 {
            return Err(StoreError::CorruptHeader(format!(
                "element {index} outside 1..={}",
                self.header.count
            )));
        }
        let offset = self.body_offset + (index - 1) * self.buf.len() as u64;
        self.reader.seek(SeekFrom::Start(offset))?;
        self.next = index;
        Ok(())
    }

    pub fn next_element(&mut self) -> Result<Option<FieldElement>, StoreError> {
        if self.next > self.header.count {
            return Ok(None);
        }
        match self.reader.read_exact(&mut self.buf) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => {
                return Err(StoreError::ShortRead { index: self.next })
            }
            Err(e) => return Err(e.into()),
        }
        let e = self.header.spec.element_from_bytes(&self.buf)?;
        if self.header.role == TapeRole::BobChallenges && e.is_zero() {
            return Err(ProtocolError::ZeroChallengeOnTape(self.next).into());
        }
        self.next += 1;
        Ok(Some(e))
    }

    /// Reads the remaining elements into memory.
    pub fn read_all(mut self) -> Result<Tape, StoreError> {
        let mut elements = Vec::with_capacity((self.header.count + 1 - self.next) as usize);
        while let Some(e) = self.next_element()? {
            elements.push(e);
        }
        Ok(Tape::new(self.header.role, Arc::clone(&self.header.spec), elements)?)
    }
}

impl Iterator for TapeReader {
    type Item = Result<FieldElement, StoreError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_element().transpose()
    }
}

pub fn read_tape(path: &Path) -> Result<Tape, StoreError> {
    TapeReader::open(path)?.read_all()
}

/// Transcript header fields.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TranscriptHeader {
    pub plan_id: [u8; 32],
    pub spec: Arc<FieldSpec>,
    pub rounds_planned: u64,
    pub timing: TimingPolicy,
    pub record_count: u64,
}

impl TranscriptHeader {
    fn encoded_len(spec: &FieldSpec) -> u64 {
        4 + 2 + 32 + 2 + spec.byte_len() as u64 + 8 * 5
    }

    fn record_len(spec: &FieldSpec) -> u64 {
        8 + 1 + 2 * spec.byte_len() as u64 + 8 + 8
    }

    fn trailer_len(spec: &FieldSpec) -> u64 {
        1 + 1 + spec.byte_len() as u64 + 8 + 1 + 1 + 8
    }

    fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&TRANSCRIPT_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_be_bytes())?;
        w.write_all(&self.plan_id)?;
        w.write_all(&(self.spec.bits() as u16).to_be_bytes())?;
        w.write_all(&self.spec.tail_bytes())?;
        for v in [
            self.rounds_planned,
            self.timing.scale_factor,
            self.timing.deadline_ns[0],
            self.timing.deadline_ns[1],
            self.record_count,
        ] {
            w.write_all(&v.to_be_bytes())?;
        }
        Ok(())
    }

    fn read_from<R: Read>(r: &mut R) -> Result<Self, StoreError> {
        check_magic(r, TRANSCRIPT_MAGIC, "transcript")?;
        let mut plan_id = [0u8; 32];
        read_exact_header(r, &mut plan_id)?;
        let spec = read_spec(r)?;
        let rounds_planned = read_u64(r)?;
        let scale_factor = read_u64(r)?;
        let deadline_ns = [read_u64(r)?, read_u64(r)?];
        let record_count = read_u64(r)?;
        if record_count > rounds_planned {
            return Err(StoreError::CorruptHeader(format!(
                "{record_count} records for a {rounds_planned}-round plan"
            )));
        }
        Ok(TranscriptHeader {
            plan_id,
            spec,
            rounds_planned,
            timing: TimingPolicy { deadline_ns, scale_factor },
            record_count,
        })
    }
}

/// Reveal and status, stored after the round records.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TranscriptTrailer {
    pub reveal: Option<Reveal>,
    pub status: TranscriptStatus,
}

impl TranscriptTrailer {
    fn write_to<W: Write>(&self, w: &mut W, spec: &FieldSpec) -> io::Result<()> {
        let mut element = vec![0u8; spec.byte_len()];
        match &self.reveal {
            Some(r) => {
                r.final_secret.write_bytes(&mut element);
                w.write_all(&[1, r.bit.as_u8()])?;
                w.write_all(&element)?;
                w.write_all(&r.received_at.to_be_bytes())?;
            }
            None => {
                w.write_all(&[0, 0])?;
                w.write_all(&element)?;
                w.write_all(&0u64.to_be_bytes())?;
            }
        }
        let (kind, reason, round) = match self.status {
            TranscriptStatus::Complete => (0, 0, 0),
            TranscriptStatus::Aborted { reason, round } => (1, reason.code(), round),
        };
        w.write_all(&[kind, reason])?;
        w.write_all(&round.to_be_bytes())
    }

    fn read_from<R: Read>(r: &mut R, spec: &Arc<FieldSpec>) -> Result<Self, StoreError> {
        let corrupt = |d: String| StoreError::CorruptHeader(format!("trailer: {d}"));
        let present = read_u8(r)?;
        let bit = read_u8(r)?;
        let mut element = vec![0u8; spec.byte_len()];
        read_exact_header(r, &mut element)?;
        let received_at = read_u64(r)?;
        let reveal = match present {
            0 => None,
            1 => Some(Reveal {
                bit: CommitBit::from_u8(bit).ok_or_else(|| corrupt(format!("bit value {bit}")))?,
                final_secret: spec.element_from_bytes(&element)?,
                received_at,
            }),
            v => return Err(corrupt(format!("reveal flag {v}"))),
        };
        let kind = read_u8(r)?;
        let reason = read_u8(r)?;
        let round = read_u64(r)?;
        let status = match kind {
            0 => TranscriptStatus::Complete,
            1 => TranscriptStatus::Aborted {
                reason: AbortReason::from_code(reason)
                    .ok_or_else(|| corrupt(format!("abort reason {reason}")))?,
                round,
            },
            v => return Err(corrupt(format!("status {v}"))),
        };
        Ok(TranscriptTrailer { reveal, status })
    }
}

fn encode_record(record: &RoundRecord, out: &mut [u8], element_len: usize) {
    out[..8].copy_from_slice(&record.index.to_be_bytes());
    out[8] = record.station.number();
    record.challenge.write_bytes(&mut out[9..9 + element_len]);
    record.answer.write_bytes(&mut out[9 + element_len..9 + 2 * element_len]);
    let t = 9 + 2 * element_len;
    out[t..t + 8].copy_from_slice(&record.challenge_issued_at.to_be_bytes());
    out[t + 8..t + 16].copy_from_slice(&record.answer_received_at.to_be_bytes());
}

fn decode_record(bytes: &[u8], spec: &Arc<FieldSpec>, position: u64) -> Result<RoundRecord, StoreError> {
    let n = spec.byte_len();
    let be = |b: &[u8]| u64::from_be_bytes(b.try_into().expect("8 bytes"));
    let station = Station::from_number(bytes[8]).ok_or_else(|| StoreError::CorruptRecord {
        index: position,
        detail: format!("station {}", bytes[8]),
    })?;
    let t = 9 + 2 * n;
    Ok(RoundRecord {
        index: be(&bytes[..8]),
        station,
        challenge: spec.element_from_bytes(&bytes[9..9 + n])?,
        answer: spec.element_from_bytes(&bytes[9 + n..t])?,
        challenge_issued_at: be(&bytes[t..t + 8]),
        answer_received_at: be(&bytes[t + 8..t + 16]),
    })
}

/// Appends round records one at a time; the record count in the header is
/// filled in by [`TranscriptWriter::finish`].
pub struct TranscriptWriter {
    writer: BufWriter<File>,
    header: TranscriptHeader,
    buf: Vec<u8>,
}

impl TranscriptWriter {
    pub fn create(
        path: &Path,
        plan_id: [u8; 32],
        spec: &Arc<FieldSpec>,
        rounds_planned: u64,
        timing: TimingPolicy,
    ) -> Result<Self, StoreError> {
        let header =
            TranscriptHeader { plan_id, spec: Arc::clone(spec), rounds_planned, timing, record_count: 0 };
        let mut writer = BufWriter::new(File::create(path)?);
        header.write_to(&mut writer)?;
        let buf = vec![0u8; TranscriptHeader::record_len(spec) as usize];
        Ok(TranscriptWriter { writer, header, buf })
    }

    pub fn records_written(&self) -> u64 {
        self.header.record_count
    }

    /// Appends the next round; indices must run 1, 2, 3, ...
    pub fn push(&mut self, record: &RoundRecord) -> Result<(), StoreError> {
        let expected = self.header.record_count + 1;
        if record.index != expected || expected > self.header.rounds_planned {
            return Err(
                ProtocolError::Sequencing { station: record.station, expected, got: record.index }.into()
            );
        }
        encode_record(record, &mut self.buf, self.header.spec.byte_len());
        self.writer.write_all(&self.buf)?;
        self.header.record_count = expected;
        Ok(())
    }

    pub fn finish(mut self, reveal: Option<&Reveal>, status: TranscriptStatus) -> Result<(), StoreError> {
        let trailer = TranscriptTrailer { reveal: reveal.cloned(), status };
        trailer.write_to(&mut self.writer, &self.header.spec)?;
        let mut file = self.writer.into_inner().map_err(|e| e.into_error())?;
        let count_offset = TranscriptHeader::encoded_len(&self.header.spec) - 8;
        file.seek(SeekFrom::Start(count_offset))?;
        file.write_all(&self.header.record_count.to_be_bytes())?;
        file.sync_all()?;
        Ok(())
    }
}

pub fn write_transcript(path: &Path, transcript: &Transcript) -> Result<(), StoreError> {
    let mut w = TranscriptWriter::create(
        path,
        transcript.plan_id,
        &transcript.spec,
        transcript.rounds_planned,
        transcript.timing,
    )?;
    for r in &transcript.rounds {
        w.push(r)?;
    }
    w.finish(transcript.reveal.as_ref(), transcript.status)
}

/// The file encoding of `transcript`, in memory.
pub fn transcript_to_bytes(transcript: &Transcript) -> Vec<u8> {
    let spec = &transcript.spec;
    let header = TranscriptHeader {
        plan_id: transcript.plan_id,
        spec: Arc::clone(spec),
        rounds_planned: transcript.rounds_planned,
        timing: transcript.timing,
        record_count: transcript.rounds.len() as u64,
    };
    let record_len = TranscriptHeader::record_len(spec) as usize;
    let mut out = Vec::with_capacity(
        TranscriptHeader::encoded_len(spec) as usize + record_len * transcript.rounds.len(),
    );
    header.write_to(&mut out).expect("vec write");
    let mut buf = vec![0u8; record_len];
    for r in &transcript.rounds {
        encode_record(r, &mut buf, spec.byte_len());
        out.extend_from_slice(&buf);
    }
    let trailer = TranscriptTrailer { reveal: transcript.reveal.clone(), status: transcript.status };
    trailer.write_to(&mut out, spec).expect("vec write");
    out
}

/// Inverse of [`transcript_to_bytes`].
pub fn transcript_from_bytes(bytes: &[u8]) -> Result<Transcript, StoreError> {
    let mut r = io::Cursor::new(bytes);
    let header = TranscriptHeader::read_from(&mut r)?;
    let spec = Arc::clone(&header.spec);
    let record_len = TranscriptHeader::record_len(&spec) as usize;
    let expected = TranscriptHeader::encoded_len(&spec) as usize
        + header.record_count as usize * record_len
        + TranscriptHeader::trailer_len(&spec) as usize;
    if bytes.len() != expected {
        return Err(StoreError::CorruptHeader(format!("{} bytes, header implies {expected}", bytes.len())));
    }
    let mut rounds = Vec::with_capacity(header.record_count as usize);
    let mut buf = vec![0u8; record_len];
    for i in 0..header.record_count {
        r.read_exact(&mut buf)?;
        rounds.push(decode_record(&buf, &spec, i + 1)?);
    }
    let trailer = TranscriptTrailer::read_from(&mut r, &spec)?;
    Ok(Transcript {
        plan_id: header.plan_id,
        spec,
        rounds_planned: header.rounds_planned,
        timing: header.timing,
        rounds,
        reveal: trailer.reveal,
        status: trailer.status,
    })
}

/// Fixed-size encoding of one round record, as stored in transcript files.
pub fn record_to_bytes(record: &RoundRecord) -> Vec<u8> {
    let spec = record.challenge.spec();
    let mut buf = vec![0u8; TranscriptHeader::record_len(spec) as usize];
    encode_record(record, &mut buf, spec.byte_len());
    buf
}

/// Decodes a sequence of records encoded by [`record_to_bytes`].
pub fn records_from_bytes(bytes: &[u8], spec: &Arc<FieldSpec>) -> Result<Vec<RoundRecord>, StoreError> {
    let record_len = TranscriptHeader::record_len(spec) as usize;
    if !bytes.len().is_multiple_of(record_len) {
        return Err(StoreError::CorruptRecord {
            index: (bytes.len() / record_len) as u64 + 1,
            detail: "partial record".into(),
        });
    }
    bytes.chunks_exact(record_len).enumerate().map(|(i, b)| decode_record(b, spec, i as u64 + 1)).collect()
}

/// Opened transcript file with O(1) access to any record.
pub struct TranscriptFile {
    file: File,
    header: TranscriptHeader,
    header_len: u64,
    record_len: u64,
}

impl TranscriptFile {
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let mut file = File::open(path)?;
        let header = {
            let mut r = BufReader::new(&mut file);
            TranscriptHeader::read_from(&mut r)?
        };
        let header_len = TranscriptHeader::encoded_len(&header.spec);
        let record_len = TranscriptHeader::record_len(&header.spec);
        let expected =
            header_len + header.record_count * record_len + TranscriptHeader::trailer_len(&header.spec);
        let actual = file.metadata()?.len();
        if actual != expected {
            return Err(StoreError::CorruptHeader(format!(
                "file is {actual} bytes, header implies {expected}"
            )));
        }
        Ok(TranscriptFile { file, header, header_len, record_len })
    }

    pub fn header(&self) -> &TranscriptHeader {
        &self.header
    }

    pub fn trailer(&mut self) -> Result<TranscriptTrailer, StoreError> {
        let offset = self.header_len + self.header.record_count * self.record_len;
        self.file.seek(SeekFrom::Start(offset))?;
        let mut r = BufReader::new(&mut self.file);
        TranscriptTrailer::read_from(&mut r, &self.header.spec)
    }

    /// Decodes records `first..first + out_len` (1-based positions) into
    /// `out`, reusing `buf`.
    fn read_chunk(
        &mut self,
        first: u64,
        count: usize,
        buf: &mut Vec<u8>,
        out: &mut Vec<RoundRecord>,
    ) -> Result<(), StoreError> {
        buf.resize(count * self.record_len as usize, 0);
        self.file.seek(SeekFrom::Start(self.header_len + (first - 1) * self.record_len))?;
        self.file.read_exact(buf)?;
        out.clear();
        for (i, bytes) in buf.chunks_exact(self.record_len as usize).enumerate() {
            out.push(decode_record(bytes, &self.header.spec, first + i as u64)?);
        }
        Ok(())
    }

    pub fn read_all(mut self) -> Result<Transcript, StoreError> {
        let trailer = self.trailer()?;
        let mut rounds = Vec::with_capacity(self.header.record_count as usize);
        let mut buf = Vec::new();
        let mut chunk = Vec::new();
        let mut first = 1;
        while first <= self.header.record_count {
            let n = (self.header.record_count + 1 - first).min(VERIFY_CHUNK as u64) as usize;
            self.read_chunk(first, n, &mut buf, &mut chunk)?;
            rounds.append(&mut chunk);
            first += n as u64;
        }
        Ok(Transcript {
            plan_id: self.header.plan_id,
            spec: self.header.spec,
            rounds_planned: self.header.rounds_planned,
            timing: self.header.timing,
            rounds,
            reveal: trailer.reveal,
            status: trailer.status,
        })
    }
}

pub fn read_transcript(path: &Path) -> Result<Transcript, StoreError> {
    TranscriptFile::open(path)?.read_all()
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub verdict: Verdict,
    pub rounds: u64,
    pub elapsed: Duration,
}

impl VerifyReport {
    pub fn rounds_per_second(&self) -> f64 {
        self.rounds as f64 / self.elapsed.as_secs_f64().max(1e-9)
    }
}

/// Verifies a transcript file without loading it: a forward pass checks
/// structure and timing, then a backward pass walks the secret chain from
/// a_m down to a_1 one chunk at a time. Memory use is bounded by
/// [`VERIFY_CHUNK`] records whatever the file size. Gives the same verdict
/// as [`crate::protocol::bob_verify`] on the loaded transcript.
pub fn verify_file(path: &Path, expected_plan: Option<&[u8; 32]>) -> Result<VerifyReport, StoreError> {
    let start = Instant::now();
    let mut file = TranscriptFile::open(path)?;
    if let Some(expected) = expected_plan {
        if *expected != file.header.plan_id {
            return Err(StoreError::PlanMismatch {
                expected: hex::encode(expected),
                found: hex::encode(file.header.plan_id),
            });
        }
    }
    let verdict = streaming_verdict(&mut file)?;
    Ok(VerifyReport { verdict, rounds: file.header.record_count, elapsed: start.elapsed() })
}

fn streaming_verdict(file: &mut TranscriptFile) -> Result<Verdict, StoreError> {
    let trailer = file.trailer()?;
    let header = file.header.clone();
    if let TranscriptStatus::Aborted { reason, round } = trailer.status {
        return Ok(Verdict::Reject(RejectReason::Aborted { reason, round }));
    }
    let reveal = match trailer.reveal {
        Some(r) if header.record_count == header.rounds_planned && header.record_count > 0 => r,
        Some(_) => {
            let e = ProtocolError::Incomplete(format!(
                "{} of {} rounds recorded",
                header.record_count, header.rounds_planned
            ));
            return Ok(Verdict::Reject(RejectReason::Incomplete(e.to_string())));
        }
        None => {
            let e = ProtocolError::Incomplete("no reveal".into());
            return Ok(Verdict::Reject(RejectReason::Incomplete(e.to_string())));
        }
    };
    let total = header.record_count;
    let mut buf = Vec::with_capacity(VERIFY_CHUNK * file.record_len as usize);
    let mut chunk = Vec::with_capacity(VERIFY_CHUNK);

    let mut first = 1;
    while first <= total {
        let n = (total + 1 - first).min(VERIFY_CHUNK as u64) as usize;
        file.read_chunk(first, n, &mut buf, &mut chunk)?;
        for (i, record) in chunk.iter().enumerate() {
            if let Err(reason) = check_record(record, first + i as u64, &header.spec, &header.timing) {
                return Ok(Verdict::Reject(reason));
            }
        }
        first += n as u64;
    }

    // Chunks taken from the end; within a chunk, step from its last record
    // down to its first, skipping x_1 which is never inverted.
    let mut a = reveal.final_secret.clone();
    let mut end = total;
    let mut first_record = None;
    while end >= 1 {
        let lo = end.saturating_sub(VERIFY_CHUNK as u64 - 1).max(1);
        let n = (end - lo + 1) as usize;
        file.read_chunk(lo, n, &mut buf, &mut chunk)?;
        if let Some(zero) = chunk.iter().find(|r| r.index >= 2 && r.challenge.is_zero()) {
            return Ok(Verdict::Reject(RejectReason::ZeroChallenge { round: zero.index }));
        }
        let skip = usize::from(lo == 1);
        let challenges: Vec<FieldElement> = chunk[skip..].iter().map(|r| r.challenge.clone()).collect();
        let inverses = batch_invert(&challenges)?;
        for (record, inverse) in chunk[skip..].iter().zip(&inverses).rev() {
            a = step_back(&a, record, inverse)?;
        }
        if lo == 1 {
            first_record = chunk.first().cloned();
        }
        end = lo - 1;
    }
    let first = first_record.expect("at least one record");
    Ok(if opens_to(&first, &a, reveal.bit) {
        Verdict::Accept(reveal.bit)
    } else {
        Verdict::Reject(RejectReason::BitMismatch)
    })
}

/// Streams an honest `rounds`-round transcript straight to disk, using the
/// seeded tapes of `seed` (the same elements [`generate_tape`] would write),
/// without holding the run in memory. Timestamps are synthetic: round k is
/// issued at `1000 k` ns and answered 1 ns later.
pub fn write_honest_transcript(
    path: &Path,
    plan_id: [u8; 32],
    spec: &Arc<FieldSpec>,
    rounds: u64,
    seed: u64,
    bit: CommitBit,
    timing: TimingPolicy,
) -> Result<(), StoreError> {
    let mut secrets = TapeElements::new(TapeRole::AliceSecrets, spec, TapeSource::Seeded(seed));
    let mut challenges = TapeElements::new(TapeRole::BobChallenges, spec, TapeSource::Seeded(seed));
    let mut w = TranscriptWriter::create(path, plan_id, spec, rounds, timing)?;
    let mut previous: Option<FieldElement> = None;
    for k in 1..=rounds {
        let x = challenges.next_element();
        let a = secrets.next_element();
        let y = match &previous {
            None => alice_commit_answer(&x, &a, bit)?,
            Some(prev) => alice_sustain_answer(&x, prev, &a)?,
        };
        w.push(&RoundRecord {
            index: k,
            station: Station::for_round(k),
            challenge: x,
            answer: y,
            challenge_issued_at: 1_000 * k,
            answer_received_at: 1_000 * k + 1,
        })?;
        previous = Some(a);
    }
    let reveal = previous.map(|a_m| Reveal { bit, final_secret: a_m, received_at: 1_000 * (rounds + 1) });
    w.finish(reveal.as_ref(), TranscriptStatus::Complete)
}

fn check_magic<R: Read>(r: &mut R, magic: [u8; 4], kind: &'static str) -> Result<(), StoreError> {
    let mut m = [0u8; 4];
    read_exact_header(r, &mut m)?;
    if m != magic {
        return Err(StoreError::BadMagic { expected: kind });
    }
    let mut v = [0u8; 2];
    read_exact_header(r, &mut v)?;
    let version = u16::from_be_bytes(v);
    if version != FORMAT_VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    Ok(())
}

fn read_spec<R: Read>(r: &mut R) -> Result<Arc<FieldSpec>, StoreError> {
    let mut b = [0u8; 2];
    read_exact_header(r, &mut b)?;
    let bits = u16::from_be_bytes(b) as u32;
    if bits == 0 || bits > crate::field::MAX_BITS {
        return Err(StoreError::CorruptHeader(format!("field width {bits}")));
    }
    let mut tail = vec![0u8; (bits as usize).div_ceil(8)];
    read_exact_header(r, &mut tail)?;
    FieldSpec::from_tail_bytes(bits, &tail).map_err(|e| StoreError::CorruptHeader(format!("field: {e}")))
}

fn read_exact_header<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), StoreError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => StoreError::CorruptHeader("file too short".into()),
        _ => e.into(),
    })
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8, StoreError> {
    let mut b = [0u8; 1];
    read_exact_header(r, &mut b)?;
    Ok(b[0])
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, StoreError> {
    let mut b = [0u8; 8];
    read_exact_header(r, &mut b)?;
    Ok(u64::from_be_bytes(b))
}
