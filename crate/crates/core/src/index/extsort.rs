//! Memory-bounded sort of fixed-width items: sorted runs are spilled to
//! temporary files and k-way merged. Duplicates are removed.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::PathBuf;

use rayon::slice::ParallelSliceMut;

use crate::error::Result;

pub trait SortItem: Copy + Ord + Send {
    const BYTES: usize;
    fn write_to(&self, out: &mut [u8]);
    fn read_from(bytes: &[u8]) -> Self;
}

impl SortItem for u64 {
    const BYTES: usize = 8;
    fn write_to(&self, out: &mut [u8]) {
        out.copy_from_slice(&self.to_le_bytes());
    }
    fn read_from(bytes: &[u8]) -> Self {
        u64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

impl SortItem for u128 {
    const BYTES: usize = 16;
    fn write_to(&self, out: &mut [u8]) {
        out.copy_from_slice(&self.to_le_bytes());
    }
    fn read_from(bytes: &[u8]) -> Self {
        u128::from_le_bytes(bytes.try_into().expect("16 bytes"))
    }
}

impl SortItem for (u128, u64) {
    const BYTES: usize = 24;
    fn write_to(&self, out: &mut [u8]) {
        out[..16].copy_from_slice(&self.0.to_le_bytes());
        out[16..].copy_from_slice(&self.1.to_le_bytes());
    }
    fn read_from(bytes: &[u8]) -> Self {
        (
            u128::from_le_bytes(bytes[..16].try_into().expect("16 bytes")),
            u64::from_le_bytes(bytes[16..].try_into().expect("8 bytes")),
        )
    }
}

pub struct ExternalSorter<T: SortItem> {
    buf: Vec<T>,
    capacity: usize,
    spill_dir: Option<PathBuf>,
    runs: Vec<File>,
}

impl<T: SortItem> ExternalSorter<T> {
    /// `memory_bytes` bounds the in-memory buffer; spill files go to
    /// `spill_dir` (or the system temp directory).
    pub fn new(memory_bytes: usize, spill_dir: Option<PathBuf>) -> Self {
        let capacity = (memory_bytes / std::mem::size_of::<T>()).max(1024);
        ExternalSorter {
            buf: Vec::new(),
            capacity,
            spill_dir,
            runs: Vec::new(),
        }
    }

    pub fn push(&mut self, item: T) -> Result<()> {
        if self.buf.capacity() == 0 {
            self.buf.reserve_exact(self.capacity.min(1 << 16));
        }
        self.buf.push(item);
        if self.buf.len() >= self.capacity {
            self.spill()?;
        }
        Ok(())
    }

    pub fn spilled_runs(&self) -> usize {
        self.runs.len()
    }

    fn sort_buffer(&mut self) {
        self.buf.par_sort_unstable();
        self.buf.dedup();
    }

    fn spill(&mut self) -> Result<()> {
        self.sort_buffer();
        let file = match &self.spill_dir {
            Some(dir) => tempfile::tempfile_in(dir)?,
            None => tempfile::tempfile()?,
        };
        let mut out = BufWriter::with_capacity(1 << 20, file);
        let mut bytes = vec![0u8; T::BYTES];
        for item in &self.buf {
            item.write_to(&mut bytes);
            out.write_all(&bytes)?;
        }
        let mut file = out.into_inner().map_err(|e| e.into_error())?;
        file.seek(SeekFrom::Start(0))?;
        self.runs.push(file);
        self.buf.clear();
        Ok(())
    }

    /// Ascending, deduplicated items.
    pub fn finish(mut self) -> Result<Sorted<T>> {
        if self.runs.is_empty() {
            self.sort_buffer();
            return Ok(Sorted::Memory(std::mem::take(&mut self.buf).into_iter()));
        }
        if !self.buf.is_empty() {
            self.spill()?;
        }
        self.buf = Vec::new();
        let mut readers: Vec<RunReader<T>> = self.runs.drain(..).map(RunReader::new).collect();
        let mut heap = BinaryHeap::with_capacity(readers.len());
        for (i, reader) in readers.iter_mut().enumerate() {
            if let Some(item) = reader.next_item()? {
                heap.push(Reverse((item, i)));
            }
        }
        Ok(Sorted::Merge {
            readers,
            heap,
            last: None,
        })
    }
}

pub struct RunReader<T> {
    input: BufReader<File>,
    bytes: Vec<u8>,
    _item: std::marker::PhantomData<T>,
}

impl<T: SortItem> RunReader<T> {
    fn new(file: File) -> Self {
        RunReader {
            input: BufReader::with_capacity(1 << 18, file),
            bytes: vec![0u8; T::BYTES],
            _item: std::marker::PhantomData,
        }
    }

    fn next_item(&mut self) -> Result<Option<T>> {
        match self.input.read_exact(&mut self.bytes) {
            Ok(()) => Ok(Some(T::read_from(&self.bytes))),
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Ok(None),
            Err(e) => Err(e.into()),
        }
    }
}

pub enum Sorted<T: SortItem> {
    Memory(std::vec::IntoIter<T>),
    Merge {
        readers: Vec<RunReader<T>>,
        heap: BinaryHeap<Reverse<(T, usize)>>,
        last: Option<T>,
    },
}

impl<T: SortItem> Iterator for Sorted<T> {
    type Item = Result<T>;

    fn next(&mut self) -> Option<Result<T>> {
        match self {
            Sorted::Memory(iter) => iter.next().map(Ok),
            Sorted::Merge { readers, heap, last } => loop {
                let Reverse((item, run)) = heap.pop()?;
                match readers[run].next_item() {
                    Ok(Some(next)) => heap.push(Reverse((next, run))),
                    Ok(None) => {}
                    Err(e) => return Some(Err(e)),
                }
                if *last != Some(item) {
                    *last = Some(item);
                    return Some(Ok(item));
                }
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn spilled_merge_equals_in_memory_sort() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let items: Vec<u128> = (0..50_000).map(|_| rng.random_range(0..20_000u128)).collect();
        let mut sorter = ExternalSorter::<u128>::new(16 * 2000, None);
        for item in &items {
            sorter.push(*item).unwrap();
        }
        assert!(sorter.spilled_runs() > 10);
        let merged: Vec<u128> = sorter.finish().unwrap().collect::<Result<_>>().unwrap();
        let mut expected = items;
        expected.sort_unstable();
        expected.dedup();
        assert_eq!(merged, expected);
    }

    #[test]
    fn pairs_sort_by_key_then_value() {
        let mut sorter = ExternalSorter::<(u128, u64)>::new(1 << 20, None);
        for item in [(2u128, 1u64), (1, 9), (2, 0), (1, 9)] {
            sorter.push(item).unwrap();
        }
        let out: Vec<_> = sorter.finish().unwrap().map(|r| r.unwrap()).collect();
        assert_eq!(out, vec![(1, 9), (2, 0), (2, 1)]);
    }
}
