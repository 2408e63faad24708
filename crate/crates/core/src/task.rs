//! Synthetic base-4 random-function task.
//!
//! Inputs are strings over `{A, B}` with one embedded block of seven base-4
//! digits encoding a number `n ∈ {2, …, 16000}`. The output copies every
//! `A`/`B` and replaces the block by the digits of `f(n)`, where `f` is a
//! random function fixed by the task seed.

use std::fmt;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const SYMBOL_MIN: u32 = 2;
pub const SYMBOL_MAX: u32 = 16_000;
pub const DEFAULT_DIGITS: usize = 7;
pub const DEFAULT_MAX_LEN: usize = 40;
pub const DEFAULT_TRAIN_COUNT: usize = 40_000;
pub const DEFAULT_TEST_COUNT: usize = 10_000;

/// Split seeds used by the command-line corpus generator.
pub const TRAIN_SPLIT: u64 = 1;
pub const TEST_SPLIT: u64 = 2;

/// Stream reserved for drawing `f`; splits use `split_seed + 1`.
const MAPPING_STREAM: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    A,
    B,
    D0,
    D1,
    D2,
    D3,
}

impl Token {
    pub const COUNT: usize = 6;
    pub const ALL: [Token; 6] = [Token::A, Token::B, Token::D0, Token::D1, Token::D2, Token::D3];

    /// Dense id in `0..6`, also used as the memory value.
    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn from_id(id: u32) -> Option<Token> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn digit(d: u8) -> Token {
        match d {
            0 => Token::D0,
            1 => Token::D1,
            2 => Token::D2,
            3 => Token::D3,
            _ => panic!("{d} is not a base-4 digit"),
        }
    }

    pub fn digit_value(self) -> Option<u8> {
        match self {
            Token::D0 => Some(0),
            Token::D1 => Some(1),
            Token::D2 => Some(2),
            Token::D3 => Some(3),
            _ => None,
        }
    }

    pub fn is_digit(self) -> bool {
        self.digit_value().is_some()
    }

    pub fn symbol(self) -> char {
        match self {
            Token::A => 'A',
            Token::B => 'B',
            Token::D0 => '0',
            Token::D1 => '1',
            Token::D2 => '2',
            Token::D3 => '3',
        }
    }

    pub fn parse(s: &str) -> Option<Token> {
        match s {
            "A" => Some(Token::A),
            "B" => Some(Token::B),
            "0" => Some(Token::D0),
            "1" => Some(Token::D1),
            "2" => Some(Token::D2),
            "3" => Some(Token::D3),
            _ => None,
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.symbol())
    }
}

/// Zero-padded big-endian base-4 digits of `n`.
pub fn encode_base4(n: u64, width: usize) -> Result<Vec<u8>> {
    if width < 32 && n >= 1u64 << (2 * width) {
        return Err(Error::OutOfRange { value: n, width });
    }
    Ok((0..width).rev().map(|i| ((n >> (2 * i)) & 3) as u8).collect())
}

pub fn decode_base4(digits: &[u8]) -> u64 {
    digits.iter().fold(0, |acc, &d| acc * 4 + d as u64)
}

/// The fixed random function and corpus geometry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticTaskSpec {
    pub seed: u64,
    pub max_len: usize,
    pub digit_count: usize,
    pub train_count: usize,
    pub test_count: usize,
    /// `mapping[n] = f(n)` for `n ∈ S`; entries 0 and 1 are unused.
    mapping: Vec<u32>,
}

impl SyntheticTaskSpec {
    /// Default geometry with `f` drawn i.i.d. uniform over S from `seed`.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(MAPPING_STREAM);
        let mut mapping = vec![0u32; SYMBOL_MAX as usize + 1];
        for slot in &mut mapping[SYMBOL_MIN as usize..] {
            *slot = rng.random_range(SYMBOL_MIN..=SYMBOL_MAX);
        }
        Self {
            seed,
            max_len: DEFAULT_MAX_LEN,
            digit_count: DEFAULT_DIGITS,
            train_count: DEFAULT_TRAIN_COUNT,
            test_count: DEFAULT_TEST_COUNT,
            mapping,
        }
    }

    pub fn from_parts(
        seed: u64,
        max_len: usize,
        digit_count: usize,
        train_count: usize,
        test_count: usize,
        mapping: Vec<u32>,
    ) -> Result<Self> {
        if mapping.len() != SYMBOL_MAX as usize + 1 {
            return Err(Error::Config(format!(
                "mapping needs {} entries, got {}",
                SYMBOL_MAX + 1,
                mapping.len()
            )));
        }
        if mapping[SYMBOL_MIN as usize..]
            .iter()
            .any(|&m| !(SYMBOL_MIN..=SYMBOL_MAX).contains(&m))
        {
            return Err(Error::Config("mapping leaves the symbol set".into()));
        }
        let spec = Self {
            seed,
            max_len,
            digit_count,
            train_count,
            test_count,
            mapping,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.digit_count == 0 || self.digit_count >= 32 || (SYMBOL_MAX as u64) >= 1u64 << (2 * self.digit_count) {
            return Err(Error::Config(format!(
                "{} base-4 digits cannot hold {SYMBOL_MAX}",
                self.digit_count
            )));
        }
        if self.max_len < self.digit_count {
            return Err(Error::Config(format!(
                "max_len {} is shorter than the digit block",
                self.max_len
            )));
        }
        Ok(())
    }

    pub fn with_max_len(mut self, max_len: usize) -> Self {
        self.max_len = max_len;
        self
    }

    pub fn with_counts(mut self, train_count: usize, test_count: usize) -> Self {
        self.train_count = train_count;
        self.test_count = test_count;
        self
    }

    pub fn f(&self, n: u32) -> u32 {
        self.mapping[n as usize]
    }

    pub fn mapping(&self) -> &[u32] {
        &self.mapping
    }

    /// Builds the example with the given number, placement and `A`/`B` filler.
    ///
    /// `filler` supplies the `length − digit_count` surrounding tokens in order.
    pub fn make_example(&self, number: u32, length: usize, block_start: usize, filler: &[Token]) -> Result<SyntheticExample> {
        if !(SYMBOL_MIN..=SYMBOL_MAX).contains(&number) {
            return Err(Error::OutOfRange {
                value: number as u64,
                width: self.digit_count,
            });
        }
        if block_start + self.digit_count > length || filler.len() != length - self.digit_count {
            return Err(Error::Precondition("block or filler does not fit the length".into()));
        }
        if filler.iter().any(|t| t.is_digit()) {
            return Err(Error::Precondition("filler must be A/B tokens".into()));
        }
        let in_digits = encode_base4(number as u64, self.digit_count)?;
        let out_digits = encode_base4(self.f(number) as u64, self.digit_count)?;
        let mut input = Vec::with_capacity(length);
        let mut output = Vec::with_capacity(length);
        input.extend_from_slice(&filler[..block_start]);
        output.extend_from_slice(&filler[..block_start]);
        input.extend(in_digits.iter().map(|&d| Token::digit(d)));
        output.extend(out_digits.iter().map(|&d| Token::digit(d)));
        input.extend_from_slice(&filler[block_start..]);
        output.extend_from_slice(&filler[block_start..]);
        Ok(SyntheticExample {
            input,
            output,
            number,
            block_start,
        })
    }

    fn split_rng(&self, split_seed: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(split_seed.wrapping_add(1));
        rng
    }

    fn sample_with<R: Rng>(&self, rng: &mut R, number: u32) -> SyntheticExample {
        let length = rng.random_range(self.digit_count..=self.max_len);
        let block_start = rng.random_range(0..=length - self.digit_count);
        let filler: Vec<Token> = (0..length - self.digit_count)
            .map(|_| if rng.random_bool(0.5) { Token::A } else { Token::B })
            .collect();
        self.make_example(number, length, block_start, &filler)
            .expect("sampled geometry is valid")
    }

    /// `count` i.i.d. examples, deterministic in `(self.seed, split_seed)`.
    pub fn generate(&self, count: usize, split_seed: u64) -> Vec<SyntheticExample> {
        let mut rng = self.split_rng(split_seed);
        (0..count)
            .map(|_| {
                let number = rng.random_range(SYMBOL_MIN..=SYMBOL_MAX);
                self.sample_with(&mut rng, number)
            })
            .collect()
    }

    /// One example per entry of `numbers`, with freshly drawn lengths and filler.
    pub fn generate_for_numbers(&self, numbers: &[u32], split_seed: u64) -> Vec<SyntheticExample> {
        let mut rng = self.split_rng(split_seed);
        numbers.iter().map(|&n| self.sample_with(&mut rng, n)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticExample {
    pub input: Vec<Token>,
    pub output: Vec<Token>,
    /// The number encoded in the input block.
    pub number: u32,
    pub block_start: usize,
}

impl SyntheticExample {
    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }

    /// Parses an input/output token pair, locating the digit block.
    pub fn from_tokens(input: Vec<Token>, output: Vec<Token>) -> std::result::Result<Self, String> {
        if input.len() != output.len() {
            return Err(format!(
                "input has {} tokens, output {}",
                input.len(),
                output.len()
            ));
        }
        let first = input.iter().position(|t| t.is_digit()).ok_or("input has no digit block")?;
        let run = input[first..].iter().take_while(|t| t.is_digit()).count();
        if input[first + run..].iter().any(|t| t.is_digit()) {
            return Err("input has more than one digit block".into());
        }
        let digits: Vec<u8> = input[first..first + run].iter().filter_map(|t| t.digit_value()).collect();
        let number = u32::try_from(decode_base4(&digits)).map_err(|_| "digit block too long")?;
        Ok(Self {
            input,
            output,
            number,
            block_start: first,
        })
    }

    pub fn digit_range(&self) -> std::ops::Range<usize> {
        let run = self.input[self.block_start..].iter().take_while(|t| t.is_digit()).count();
        self.block_start..self.block_start + run
    }
}

fn render(tokens: &[Token]) -> String {
    tokens.iter().map(|t| t.symbol().to_string()).collect::<Vec<_>>().join(" ")
}

/// Header line of a corpus file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusHeader {
    pub seed: u64,
    pub split: String,
}

/// Writes `#seed=<u64> split=<name>` followed by one `input TAB output` line per example.
pub fn write_corpus<W: Write>(mut w: W, header: &CorpusHeader, examples: &[SyntheticExample]) -> std::io::Result<()> {
    writeln!(w, "#seed={} split={}", header.seed, header.split)?;
    for ex in examples {
        writeln!(w, "{}\t{}", render(&ex.input), render(&ex.output))?;
    }
    w.flush()
}

pub fn read_corpus<R: BufRead>(r: R) -> Result<(CorpusHeader, Vec<SyntheticExample>)> {
    let mut lines = r.lines().enumerate();
    let io_err = |line: usize, e: std::io::Error| Error::Corpus {
        line,
        reason: e.to_string(),
    };
    let (_, first) = lines.next().ok_or(Error::Corpus {
        line: 1,
        reason: "empty corpus file".into(),
    })?;
    let first = first.map_err(|e| io_err(1, e))?;
    let header = parse_header(&first).ok_or_else(|| Error::Corpus {
        line: 1,
        reason: format!("expected `#seed=<u64> split=<name>`, found {first:?}"),
    })?;
    let mut examples = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.map_err(|e| io_err(line_no, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Corpus { line: line_no, reason };
        let (inp, out) = line.split_once('\t').ok_or_else(|| bad("missing TAB separator".into()))?;
        let parse = |s: &str| -> Result<Vec<Token>> {
            s.split_whitespace()
                .map(|t| Token::parse(t).ok_or_else(|| bad(format!("unknown token {t:?}"))))
                .collect()
        };
        let example = SyntheticExample::from_tokens(parse(inp)?, parse(out)?).map_err(bad)?;
        examples.push(example);
    }
    Ok((header, examples))
}

fn parse_header(line: &str) -> Option<CorpusHeader> {
    let rest = line.strip_prefix('#')?;
    let mut seed = None;
    let mut split = None;
    for field in rest.split_whitespace() {
        match field.split_once('=')? {
            ("seed", v) => seed = v.parse().ok(),
            ("split", v) => split = Some(v.to_string()),
            _ => return None,
        }
    }
    Some(CorpusHeader {
        seed: seed?,
        split: split?,
    })
}

/// Full-sequence accuracy of nearest-neighbor retrieval by token Hamming distance.
///
/// Sequences are compared position by position; positions present in only one
/// of the two count as mismatches. The nearest training example (earliest on
/// ties) lends its output, truncated or padded with `A` to the test length.
pub fn hamming_baseline(train: &[SyntheticExample], test: &[SyntheticExample]) -> Result<f64> {
    if train.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    if test.is_empty() {
        return Ok(0.0);
    }
    const PAD: u8 = u8::MAX;
    let longest = train.iter().chain(test).map(SyntheticExample::len).max().unwrap_or(0);
    let stride = longest.div_ceil(16).max(1) * 16;
    let pack = |ex: &SyntheticExample, buf: &mut [u8]| {
        buf.fill(PAD);
        for (b, t) in buf.iter_mut().zip(&ex.input) {
            *b = t.id() as u8;
        }
    };
    let mut packed = vec![0u8; train.len() * stride];
    for (ex, buf) in train.iter().zip(packed.chunks_exact_mut(stride)) {
        pack(ex, buf);
    }
    let mut probe = vec![0u8; stride];
    let mut correct = 0usize;
    for ex in test {
        pack(ex, &mut probe);
        let mut best = (u32::MAX, 0usize);
        for (i, row) in packed.chunks_exact(stride).enumerate() {
            let d: u32 = row.iter().zip(&probe).map(|(a, b)| (a != b) as u32).sum();
            if d < best.0 {
                best = (d, i);
                if d == 0 {
                    break;
                }
            }
        }
        let source = &train[best.1].output;
        let ok = (0..ex.len()).all(|p| source.get(p).copied().unwrap_or(Token::A) == ex.output[p]);
        if ok {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn digits(s: &str) -> Vec<u8> {
        s.split_whitespace().map(|d| d.parse().unwrap()).collect()
    }

    #[test]
    fn base4_worked_examples() {
        assert_eq!(encode_base4(1982, 7).unwrap(), digits("0 1 3 2 3 3 2"));
        assert_eq!(encode_base4(3726, 7).unwrap(), digits("0 3 2 2 0 3 2"));
        assert_eq!(encode_base4(0, 7).unwrap(), vec![0; 7]);
        assert_eq!(decode_base4(&digits("0 1 3 2 3 3 2")), 1982);
    }

    #[test]
    fn base4_out_of_range() {
        assert!(encode_base4(1 << 14, 7).is_err());
        assert!(encode_base4((1 << 14) - 1, 7).is_ok());
    }

    #[test]
    fn worked_input_output_pair() {
        let mut mapping = SyntheticTaskSpec::new(0).mapping().to_vec();
        mapping[1982] = 3726;
        let spec = SyntheticTaskSpec::from_parts(0, 40, 7, 10, 10, mapping).unwrap();
        use Token::*;
        let ex = spec.make_example(1982, 13, 1, &[A, B, A, B, A, B]).unwrap();
        assert_eq!(render(&ex.input), "A 0 1 3 2 3 3 2 B A B A B");
        assert_eq!(render(&ex.output), "A 0 3 2 2 0 3 2 B A B A B");
    }

    #[test]
    fn generated_examples_respect_construction() {
        let spec = SyntheticTaskSpec::new(42);
        for ex in spec.generate(500, TRAIN_SPLIT) {
            assert_eq!(ex.input.len(), ex.output.len());
            assert!((7..=40).contains(&ex.len()));
            let block = ex.digit_range();
            assert_eq!(block, ex.block_start..ex.block_start + 7);
            for (p, (i, o)) in ex.input.iter().zip(&ex.output).enumerate() {
                if block.contains(&p) {
                    assert!(i.is_digit() && o.is_digit());
                } else {
                    assert!(!i.is_digit());
                    assert_eq!(i, o);
                }
            }
            let inp: Vec<u8> = ex.input[block.clone()].iter().filter_map(|t| t.digit_value()).collect();
            let out: Vec<u8> = ex.output[block].iter().filter_map(|t| t.digit_value()).collect();
            assert_eq!(decode_base4(&inp), ex.number as u64);
            assert_eq!(decode_base4(&out), spec.f(ex.number) as u64);
        }
    }

    #[test]
    fn splits_share_f_but_not_streams() {
        let spec = SyntheticTaskSpec::new(9);
        let a = spec.generate(50, TRAIN_SPLIT);
        let b = spec.generate(50, TEST_SPLIT);
        assert_ne!(a, b);
        assert_eq!(a, spec.generate(50, TRAIN_SPLIT));
        assert_eq!(SyntheticTaskSpec::new(9), spec);
        assert_ne!(SyntheticTaskSpec::new(10).mapping(), spec.mapping());
    }

    #[test]
    fn corpus_round_trip() {
        let spec = SyntheticTaskSpec::new(3);
        let examples = spec.generate(20, TEST_SPLIT);
        let header = CorpusHeader {
            seed: 3,
            split: "test".into(),
        };
        let mut buf = Vec::new();
        write_corpus(&mut buf, &header, &examples).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("#seed=3 split=test\n"));
        let (h, back) = read_corpus(&buf[..]).unwrap();
        assert_eq!(h, header);
        assert_eq!(back, examples);
    }

    #[test]
    fn corpus_errors_name_the_line() {
        let bad = "#seed=1 split=x\nA 0 0 0 0 0 0 1\tA 0 0 0 0 0 0 1\nA Q\tA A\n";
        match read_corpus(bad.as_bytes()) {
            Err(Error::Corpus { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(read_corpus("seed=1\n".as_bytes()).is_err());
    }

    #[test]
    fn hamming_exact_match_is_correct() {
        let spec = SyntheticTaskSpec::new(5);
        let train = spec.generate(30, TRAIN_SPLIT);
        let acc = hamming_baseline(&train, &train[..10]).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn hamming_single_flip_retrieves_the_lone_example() {
        // direct simulation: the only training example is always retrieved, so the
        // prediction is right iff the flipped test example has the same output
        let spec = SyntheticTaskSpec::new(6);
        let train = spec.generate(1, TRAIN_SPLIT);
        let mut input = train[0].input.clone();
        let p = (0..input.len()).find(|&i| !input[i].is_digit()).unwrap();
        input[p] = if input[p] == Token::A { Token::B } else { Token::A };
        let mut output = train[0].output.clone();
        output[p] = input[p];
        let flipped = SyntheticExample::from_tokens(input, output).unwrap();
        assert_eq!(hamming_baseline(&train, &[flipped]).unwrap(), 0.0);

        let other = spec.generate(1, 77);
        let expected = (0..other[0].len())
            .all(|i| train[0].output.get(i).copied().unwrap_or(Token::A) == other[0].output[i]);
        assert_eq!(hamming_baseline(&train, &other).unwrap(), expected as u8 as f64);
    }

    #[test]
    fn hamming_needs_training_data() {
        assert!(hamming_baseline(&[], &[]).is_err());
    }
}
