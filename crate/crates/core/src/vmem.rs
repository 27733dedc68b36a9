// SPDX-License-Identifier: Apache-2.0

//! Simulated physical memory, per-address-space page tables, per-core TLBs
//! and a reverse map from physical frames to every virtual mapping.
//!
//! Virtual pages are flat integer page numbers; there is no radix walk. A
//! page-table entry carries the bits the isolation mechanism relies on
//! (present, user, writable, executable) plus a copy-on-write marker.
//!
//! TLBs are unbounded per-core caches that are only ever invalidated by an
//! explicit [`Memory::tlb_flush`]. [`Memory::set_bit`] does not flush, so a
//! stale translation stays observable until somebody flushes it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAGE_SIZE: usize = 4096;
pub const PAGE_SHIFT: u32 = 12;

/// Virtual page number.
pub type Vpn = u64;

pub fn vpn_of(vaddr: u64) -> Vpn {
    vaddr >> PAGE_SHIFT
}

pub fn page_offset(vaddr: u64) -> usize {
    (vaddr & (PAGE_SIZE as u64 - 1)) as usize
}

pub fn page_base(vpn: Vpn) -> u64 {
    vpn << PAGE_SHIFT
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FrameId(pub u32);

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Asid(pub u32);

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "f{}", self.0)
    }
}

impl fmt::Display for Asid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "as{}", self.0)
    }
}

/// Permission bits requested when mapping a page.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Perms {
    pub user: bool,
    pub writable: bool,
    pub executable: bool,
}

impl Perms {
    pub const USER_RW: Perms = Perms { user: true, writable: true, executable: false };
    pub const USER_RO: Perms = Perms { user: true, writable: false, executable: false };
    pub const USER_RX: Perms = Perms { user: true, writable: false, executable: true };
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pte {
    pub frame: FrameId,
    pub present: bool,
    pub user: bool,
    pub writable: bool,
    pub executable: bool,
    /// Copy-on-write pending. Implies `writable == false`.
    pub cow: bool,
}

impl Pte {
    pub fn perms(&self) -> Perms {
        Perms { user: self.user, writable: self.writable, executable: self.executable }
    }
}

/// A single page-table bit that can be toggled with [`Memory::set_bit`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PteBit {
    User,
    Writable,
    Executable,
}

/// Per-page VMA flags. Contiguous pages with equal flags form one [`Vma`].
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VmFlags {
    pub vm_write: bool,
    pub vm_exec: bool,
    pub shared: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vma {
    /// First page, inclusive.
    pub start: Vpn,
    /// Last page, inclusive.
    pub end: Vpn,
    pub vm_write: bool,
    pub vm_exec: bool,
    pub shared: bool,
}

impl Vma {
    pub fn contains(&self, vpn: Vpn) -> bool {
        (self.start..=self.end).contains(&vpn)
    }

    fn flags(&self) -> VmFlags {
        VmFlags { vm_write: self.vm_write, vm_exec: self.vm_exec, shared: self.shared }
    }
}

/// One hardware mapping: the unit that is switched like a `CR3` value.
///
/// VMA information is stored per page and exposed through [`vmas`], which
/// always returns the canonical (maximally merged) list. An address space
/// may borrow the VMAs of another one (`vma_source`), which is how the
/// enclave's isolated mapping keeps the host's VMA structures.
///
/// [`vmas`]: AddressSpace::vmas
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddressSpace {
    pub asid: Asid,
    pub entries: BTreeMap<Vpn, Pte>,
    vm: BTreeMap<Vpn, VmFlags>,
    pub vma_source: Option<Asid>,
}

impl AddressSpace {
    fn new(asid: Asid) -> Self {
        AddressSpace { asid, entries: BTreeMap::new(), vm: BTreeMap::new(), vma_source: None }
    }

    pub fn vm_flags(&self, vpn: Vpn) -> Option<VmFlags> {
        self.vm.get(&vpn).copied()
    }

    pub fn vmas(&self) -> Vec<Vma> {
        let mut out: Vec<Vma> = Vec::new();
        for (&vpn, flags) in &self.vm {
            match out.last_mut() {
                Some(last) if last.end + 1 == vpn && last.flags() == *flags => last.end = vpn,
                _ => out.push(Vma {
                    start: vpn,
                    end: vpn,
                    vm_write: flags.vm_write,
                    vm_exec: flags.vm_exec,
                    shared: flags.shared,
                }),
            }
        }
        out
    }

    pub fn mapped_vpns(&self) -> impl Iterator<Item = Vpn> + '_ {
        self.entries.keys().copied()
    }
}

/// Per-core translation cache holding PTE snapshots.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Tlb {
    pub core: usize,
    cached: BTreeMap<(Asid, Vpn), Pte>,
}

impl Tlb {
    pub fn lookup(&self, asid: Asid, vpn: Vpn) -> Option<&Pte> {
        self.cached.get(&(asid, vpn))
    }

    pub fn len(&self) -> usize {
        self.cached.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cached.is_empty()
    }
}

/// One virtual mapping of a frame as recorded in the reverse map.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Alias {
    pub asid: Asid,
    pub vpn: Vpn,
    pub perms: Perms,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReverseMap {
    index: BTreeMap<FrameId, BTreeMap<(Asid, Vpn), Perms>>,
}

impl ReverseMap {
    fn insert(&mut self, frame: FrameId, asid: Asid, vpn: Vpn, perms: Perms) {
        self.index.entry(frame).or_default().insert((asid, vpn), perms);
    }

    fn remove(&mut self, frame: FrameId, asid: Asid, vpn: Vpn) {
        if let Some(set) = self.index.get_mut(&frame) {
            set.remove(&(asid, vpn));
            if set.is_empty() {
                self.index.remove(&frame);
            }
        }
    }

    fn update(&mut self, frame: FrameId, asid: Asid, vpn: Vpn, perms: Perms) {
        if let Some(p) = self.index.get_mut(&frame).and_then(|s| s.get_mut(&(asid, vpn))) {
            *p = perms;
        }
    }

    pub fn aliases_of(&self, frame: FrameId) -> Vec<Alias> {
        self.index
            .get(&frame)
            .map(|set| {
                set.iter().map(|(&(asid, vpn), &perms)| Alias { asid, vpn, perms }).collect()
            })
            .unwrap_or_default()
    }

    pub fn frames(&self) -> impl Iterator<Item = FrameId> + '_ {
        self.index.keys().copied()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    User,
    Kernel,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessKind {
    Read,
    Write,
    Exec,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultReason {
    NotPresent,
    UserBitViolation,
    WriteViolation,
    ExecViolation,
    CowPending,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PageFault {
    pub asid: Asid,
    pub vaddr: u64,
    pub mode: Mode,
    pub kind: AccessKind,
    pub reason: FaultReason,
}

impl PageFault {
    pub fn vpn(&self) -> Vpn {
        vpn_of(self.vaddr)
    }
}

/// A successful translation.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Translation {
    pub frame: FrameId,
    pub vpn: Vpn,
    pub offset: usize,
    pub tlb_hit: bool,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VmError {
    #[error("vpn {vpn:#x} already mapped in {asid}")]
    DoubleMap { asid: Asid, vpn: Vpn },
    #[error("vpn {vpn:#x} not mapped in {asid}")]
    Unmapped { asid: Asid, vpn: Vpn },
    #[error("vpn {vpn:#x} in {asid} is not copy-on-write")]
    NotCow { asid: Asid, vpn: Vpn },
    #[error("vpn {vpn:#x} in {asid} is copy-on-write; resolve before making it writable")]
    CowPending { asid: Asid, vpn: Vpn },
    #[error("no address space {0}")]
    NoSuchAddressSpace(Asid),
    #[error("no frame {0}")]
    NoSuchFrame(FrameId),
}

pub type VmResult<T> = Result<T, VmError>;

type FrameBytes = Arc<[u8; PAGE_SIZE]>;

/// The whole simulated memory system: frames, address spaces, TLBs and the
/// reverse map. Cloning is cheap-ish: frame contents are shared until
/// written.
#[derive(Clone, Debug)]
pub struct Memory {
    frames: Vec<FrameBytes>,
    spaces: BTreeMap<Asid, AddressSpace>,
    tlbs: Vec<Tlb>,
    rmap: ReverseMap,
    next_asid: u32,
}

impl Memory {
    pub fn new(cores: usize) -> Self {
        let cores = cores.max(1);
        Memory {
            frames: Vec::new(),
            spaces: BTreeMap::new(),
            tlbs: (0..cores).map(|core| Tlb { core, cached: BTreeMap::new() }).collect(),
            rmap: ReverseMap::default(),
            next_asid: 1,
        }
    }

    pub fn cores(&self) -> usize {
        self.tlbs.len()
    }

    pub fn all_cores(&self) -> Vec<usize> {
        (0..self.tlbs.len()).collect()
    }

    pub fn tlb(&self, core: usize) -> &Tlb {
        &self.tlbs[core]
    }

    pub fn alloc_frame(&mut self) -> FrameId {
        let id = FrameId(self.frames.len() as u32);
        self.frames.push(Arc::new([0u8; PAGE_SIZE]));
        id
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn frame_bytes(&self, frame: FrameId) -> &[u8; PAGE_SIZE] {
        &self.frames[frame.0 as usize]
    }

    pub fn frame_bytes_mut(&mut self, frame: FrameId) -> &mut [u8; PAGE_SIZE] {
        Arc::make_mut(&mut self.frames[frame.0 as usize])
    }

    pub fn create_space(&mut self) -> Asid {
        let asid = Asid(self.next_asid);
        self.next_asid += 1;
        self.spaces.insert(asid, AddressSpace::new(asid));
        asid
    }

    pub fn space(&self, asid: Asid) -> Option<&AddressSpace> {
        self.spaces.get(&asid)
    }

    pub fn spaces(&self) -> impl Iterator<Item = &AddressSpace> {
        self.spaces.values()
    }

    pub fn set_vma_source(&mut self, asid: Asid, source: Option<Asid>) -> VmResult<()> {
        self.space_mut(asid)?.vma_source = source;
        Ok(())
    }

    /// VMA list governing `asid`, following a borrowed source if set.
    pub fn vmas(&self, asid: Asid) -> Vec<Vma> {
        self.vma_space(asid).map(AddressSpace::vmas).unwrap_or_default()
    }

    pub fn vm_flags(&self, asid: Asid, vpn: Vpn) -> Option<VmFlags> {
        self.vma_space(asid).and_then(|s| s.vm_flags(vpn))
    }

    fn vma_space(&self, asid: Asid) -> Option<&AddressSpace> {
        let space = self.spaces.get(&asid)?;
        match space.vma_source {
            Some(src) => self.spaces.get(&src),
            None => Some(space),
        }
    }

    fn space_mut(&mut self, asid: Asid) -> VmResult<&mut AddressSpace> {
        self.spaces.get_mut(&asid).ok_or(VmError::NoSuchAddressSpace(asid))
    }

    pub fn pte(&self, asid: Asid, vpn: Vpn) -> Option<&Pte> {
        self.spaces.get(&asid)?.entries.get(&vpn)
    }

    pub fn map(
        &mut self,
        asid: Asid,
        vpn: Vpn,
        frame: FrameId,
        perms: Perms,
        shared: bool,
    ) -> VmResult<()> {
        let flags = VmFlags { vm_write: perms.writable, vm_exec: perms.executable, shared };
        self.map_with_flags(asid, vpn, frame, perms, flags)
    }

    /// Maps with VMA flags that may differ from the PTE bits (for example a
    /// read-only view of a page whose VMA allows writes).
    pub fn map_with_flags(
        &mut self,
        asid: Asid,
        vpn: Vpn,
        frame: FrameId,
        perms: Perms,
        flags: VmFlags,
    ) -> VmResult<()> {
        if frame.0 as usize >= self.frames.len() {
            return Err(VmError::NoSuchFrame(frame));
        }
        let space = self.space_mut(asid)?;
        if space.entries.contains_key(&vpn) {
            return Err(VmError::DoubleMap { asid, vpn });
        }
        space.entries.insert(
            vpn,
            Pte {
                frame,
                present: true,
                user: perms.user,
                writable: perms.writable,
                executable: perms.executable,
                cow: false,
            },
        );
        if space.vma_source.is_none() {
            space.vm.insert(vpn, flags);
        }
        self.rmap.insert(frame, asid, vpn, perms);
        Ok(())
    }

    /// Removes a mapping and shoots down its TLB entries on every core.
    pub fn unmap(&mut self, asid: Asid, vpn: Vpn) -> VmResult<Pte> {
        let space = self.space_mut(asid)?;
        let pte = space.entries.remove(&vpn).ok_or(VmError::Unmapped { asid, vpn })?;
        space.vm.remove(&vpn);
        self.rmap.remove(pte.frame, asid, vpn);
        self.flush_all_cores(asid, vpn);
        Ok(pte)
    }

    /// Unmaps everything and drops the address space.
    pub fn destroy_space(&mut self, asid: Asid) {
        let vpns: Vec<Vpn> = match self.spaces.get(&asid) {
            Some(space) => space.mapped_vpns().collect(),
            None => return,
        };
        for vpn in vpns {
            let _ = self.unmap(asid, vpn);
        }
        self.spaces.remove(&asid);
    }

    pub fn access(
        &mut self,
        core: usize,
        asid: Asid,
        mode: Mode,
        kind: AccessKind,
        vaddr: u64,
    ) -> Result<Translation, PageFault> {
        let vpn = vpn_of(vaddr);
        let fault = |reason| PageFault { asid, vaddr, mode, kind, reason };
        let (pte, tlb_hit) = match self.tlbs[core].cached.get(&(asid, vpn)) {
            Some(pte) => (*pte, true),
            None => {
                let pte = match self.spaces.get(&asid).and_then(|s| s.entries.get(&vpn)) {
                    Some(pte) if pte.present => *pte,
                    _ => return Err(fault(FaultReason::NotPresent)),
                };
                self.tlbs[core].cached.insert((asid, vpn), pte);
                (pte, false)
            }
        };
        if mode == Mode::User && !pte.user {
            return Err(fault(FaultReason::UserBitViolation));
        }
        match kind {
            AccessKind::Exec if !pte.executable => return Err(fault(FaultReason::ExecViolation)),
            AccessKind::Write if pte.cow => return Err(fault(FaultReason::CowPending)),
            AccessKind::Write if !pte.writable => return Err(fault(FaultReason::WriteViolation)),
            _ => {}
        }
        Ok(Translation { frame: pte.frame, vpn, offset: page_offset(vaddr), tlb_hit })
    }

    /// Updates one PTE bit and the reverse-map snapshot. Does not flush.
    pub fn set_bit(&mut self, asid: Asid, vpn: Vpn, bit: PteBit, value: bool) -> VmResult<bool> {
        let space = self.space_mut(asid)?;
        let pte = space.entries.get_mut(&vpn).ok_or(VmError::Unmapped { asid, vpn })?;
        let slot = match bit {
            PteBit::User => &mut pte.user,
            PteBit::Writable => {
                if value && pte.cow {
                    return Err(VmError::CowPending { asid, vpn });
                }
                &mut pte.writable
            }
            PteBit::Executable => &mut pte.executable,
        };
        let previous = std::mem::replace(slot, value);
        let (frame, perms) = (pte.frame, pte.perms());
        self.rmap.update(frame, asid, vpn, perms);
        Ok(previous)
    }

    /// Updates the `VM_WRITE` flag of the page's VMA, splitting it as needed.
    pub fn set_vm_write(&mut self, asid: Asid, vpn: Vpn, value: bool) -> VmResult<bool> {
        self.update_vm(asid, vpn, |f| std::mem::replace(&mut f.vm_write, value))
    }

    pub fn set_vm_exec(&mut self, asid: Asid, vpn: Vpn, value: bool) -> VmResult<bool> {
        self.update_vm(asid, vpn, |f| std::mem::replace(&mut f.vm_exec, value))
    }

    fn update_vm(
        &mut self,
        asid: Asid,
        vpn: Vpn,
        f: impl FnOnce(&mut VmFlags) -> bool,
    ) -> VmResult<bool> {
        let target = self.space_mut(asid)?.vma_source.unwrap_or(asid);
        let space = self.space_mut(target)?;
        let flags = space.vm.get_mut(&vpn).ok_or(VmError::Unmapped { asid, vpn })?;
        Ok(f(flags))
    }

    pub fn tlb_flush(&mut self, asid: Asid, vpn: Vpn, cores: &BTreeSet<usize>) {
        for &core in cores {
            if let Some(tlb) = self.tlbs.get_mut(core) {
                tlb.cached.remove(&(asid, vpn));
            }
        }
    }

    pub fn flush_all_cores(&mut self, asid: Asid, vpn: Vpn) {
        for tlb in &mut self.tlbs {
            tlb.cached.remove(&(asid, vpn));
        }
    }

    /// Breaks copy-on-write sharing: the mapping receives a fresh private
    /// frame with copied contents and regains write access per its VMA.
    pub fn cow_resolve(&mut self, asid: Asid, vpn: Vpn) -> VmResult<FrameId> {
        let pte = *self.pte(asid, vpn).ok_or(VmError::Unmapped { asid, vpn })?;
        if !pte.cow {
            return Err(VmError::NotCow { asid, vpn });
        }
        let vm_write = self.vm_flags(asid, vpn).map(|f| f.vm_write).unwrap_or(false);
        let fresh = FrameId(self.frames.len() as u32);
        let copy = self.frames[pte.frame.0 as usize].clone();
        self.frames.push(Arc::new(*copy));
        let space = self.space_mut(asid)?;
        let entry = space.entries.get_mut(&vpn).expect("checked above");
        entry.frame = fresh;
        entry.cow = false;
        entry.writable = vm_write;
        let perms = entry.perms();
        self.rmap.remove(pte.frame, asid, vpn);
        self.rmap.insert(fresh, asid, vpn, perms);
        self.flush_all_cores(asid, vpn);
        Ok(fresh)
    }

    pub fn aliases_of(&self, frame: FrameId) -> Vec<Alias> {
        self.rmap.aliases_of(frame)
    }

    pub fn reverse_map(&self) -> &ReverseMap {
        &self.rmap
    }

    /// Creates a child address space that shares every page of `parent`.
    /// Private writable pages become copy-on-write in both spaces.
    pub fn fork_space(&mut self, parent: Asid) -> VmResult<Asid> {
        self.fork_space_with(parent, &BTreeSet::new())
    }

    /// Like [`Memory::fork_space`], but pages in `force_cow` are treated as
    /// writable even if their PTE currently is not (a page temporarily
    /// write-protected must still be shared copy-on-write).
    pub fn fork_space_with(&mut self, parent: Asid, force_cow: &BTreeSet<Vpn>) -> VmResult<Asid> {
        let src = self.spaces.get(&parent).ok_or(VmError::NoSuchAddressSpace(parent))?.clone();
        let child = self.create_space();
        for (&vpn, pte) in &src.entries {
            let flags = src.vm.get(&vpn).copied().unwrap_or_default();
            let mut copy = *pte;
            if !flags.shared && (pte.writable || pte.cow || force_cow.contains(&vpn)) {
                copy.cow = true;
                copy.writable = false;
                let parent_entry = self
                    .spaces
                    .get_mut(&parent)
                    .and_then(|s| s.entries.get_mut(&vpn))
                    .expect("parent entry");
                parent_entry.cow = true;
                parent_entry.writable = false;
                let perms = parent_entry.perms();
                self.rmap.update(pte.frame, parent, vpn, perms);
                self.flush_all_cores(parent, vpn);
            }
            let space = self.spaces.get_mut(&child).expect("just created");
            space.entries.insert(vpn, copy);
            space.vm.insert(vpn, flags);
            self.rmap.insert(copy.frame, child, vpn, copy.perms());
        }
        Ok(child)
    }

    /// Reads `len` bytes starting at `vaddr`. All pages are translated
    /// before any byte is copied.
    pub fn read_bytes(
        &mut self,
        core: usize,
        asid: Asid,
        mode: Mode,
        vaddr: u64,
        len: usize,
    ) -> Result<Vec<u8>, PageFault> {
        let pieces = self.translate_range(core, asid, mode, AccessKind::Read, vaddr, len)?;
        let mut out = Vec::with_capacity(len);
        for (t, n) in pieces {
            out.extend_from_slice(&self.frame_bytes(t.frame)[t.offset..t.offset + n]);
        }
        Ok(out)
    }

    /// Writes `bytes` at `vaddr`; nothing is written if any page faults.
    pub fn write_bytes(
        &mut self,
        core: usize,
        asid: Asid,
        mode: Mode,
        vaddr: u64,
        bytes: &[u8],
    ) -> Result<Vec<FrameId>, PageFault> {
        let pieces = self.translate_range(core, asid, mode, AccessKind::Write, vaddr, bytes.len())?;
        let mut written = Vec::with_capacity(pieces.len());
        let mut rest = bytes;
        for (t, n) in pieces {
            let (head, tail) = rest.split_at(n);
            self.frame_bytes_mut(t.frame)[t.offset..t.offset + n].copy_from_slice(head);
            written.push(t.frame);
            rest = tail;
        }
        Ok(written)
    }

    fn translate_range(
        &mut self,
        core: usize,
        asid: Asid,
        mode: Mode,
        kind: AccessKind,
        vaddr: u64,
        len: usize,
    ) -> Result<Vec<(Translation, usize)>, PageFault> {
        let mut pieces = Vec::new();
        let mut addr = vaddr;
        let mut left = len;
        while left > 0 {
            let t = self.access(core, asid, mode, kind, addr)?;
            let n = left.min(PAGE_SIZE - t.offset);
            pieces.push((t, n));
            addr += n as u64;
            left -= n;
        }
        Ok(pieces)
    }

    /// Writes through the page tables without consulting them for
    /// permissions (used by scenario setup and `/proc/<pid>/mem` writes).
    pub fn poke(&mut self, asid: Asid, vaddr: u64, bytes: &[u8]) -> VmResult<()> {
        let mut addr = vaddr;
        let mut rest = bytes;
        while !rest.is_empty() {
            let vpn = vpn_of(addr);
            let off = page_offset(addr);
            let frame = self
                .pte(asid, vpn)
                .filter(|p| p.present)
                .ok_or(VmError::Unmapped { asid, vpn })?
                .frame;
            let n = rest.len().min(PAGE_SIZE - off);
            let (head, tail) = rest.split_at(n);
            self.frame_bytes_mut(frame)[off..off + n].copy_from_slice(head);
            addr += n as u64;
            rest = tail;
        }
        Ok(())
    }

    /// Reads through the page tables ignoring permissions.
    pub fn peek(&self, asid: Asid, vaddr: u64, len: usize) -> VmResult<Vec<u8>> {
        let mut out = Vec::with_capacity(len);
        let mut addr = vaddr;
        while out.len() < len {
            let vpn = vpn_of(addr);
            let off = page_offset(addr);
            let frame = self
                .pte(asid, vpn)
                .filter(|p| p.present)
                .ok_or(VmError::Unmapped { asid, vpn })?
                .frame;
            let n = (len - out.len()).min(PAGE_SIZE - off);
            out.extend_from_slice(&self.frame_bytes(frame)[off..off + n]);
            addr += n as u64;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Memory, Asid, FrameId) {
        let mut mem = Memory::new(2);
        let asid = mem.create_space();
        let f = mem.alloc_frame();
        mem.map(asid, 0x10, f, Perms::USER_RW, false).unwrap();
        (mem, asid, f)
    }

    #[test]
    fn map_records_reverse_mapping() {
        let (mem, asid, f) = setup();
        let aliases = mem.aliases_of(f);
        assert_eq!(aliases.len(), 1);
        assert_eq!((aliases[0].asid, aliases[0].vpn), (asid, 0x10));
    }

    #[test]
    fn alias_into_second_space() {
        let (mut mem, _, f) = setup();
        let other = mem.create_space();
        mem.map(other, 0x20, f, Perms::USER_RW, true).unwrap();
        assert_eq!(mem.aliases_of(f).len(), 2);
        mem.unmap(other, 0x20).unwrap();
        assert_eq!(mem.aliases_of(f).len(), 1);
    }

    #[test]
    fn double_map_rejected() {
        let (mut mem, asid, f) = setup();
        assert_eq!(
            mem.map(asid, 0x10, f, Perms::USER_RW, false),
            Err(VmError::DoubleMap { asid, vpn: 0x10 })
        );
    }

    #[test]
    fn fault_reasons() {
        let (mut mem, asid, _) = setup();
        let va = page_base(0x10);
        mem.set_bit(asid, 0x10, PteBit::User, false).unwrap();
        let err = mem.access(0, asid, Mode::User, AccessKind::Read, va).unwrap_err();
        assert_eq!(err.reason, FaultReason::UserBitViolation);
        assert!(mem.access(0, asid, Mode::Kernel, AccessKind::Read, va).is_ok());

        mem.set_bit(asid, 0x10, PteBit::User, true).unwrap();
        mem.set_bit(asid, 0x10, PteBit::Writable, false).unwrap();
        mem.flush_all_cores(asid, 0x10);
        let err = mem.access(1, asid, Mode::User, AccessKind::Write, va).unwrap_err();
        assert_eq!(err.reason, FaultReason::WriteViolation);
        let err = mem.access(1, asid, Mode::User, AccessKind::Exec, va).unwrap_err();
        assert_eq!(err.reason, FaultReason::ExecViolation);
        let err = mem.access(1, asid, Mode::User, AccessKind::Read, va + 4096).unwrap_err();
        assert_eq!(err.reason, FaultReason::NotPresent);
    }

    #[test]
    fn stale_tlb_until_flush() {
        let (mut mem, asid, _) = setup();
        let va = page_base(0x10);
        mem.access(0, asid, Mode::User, AccessKind::Read, va).unwrap();
        mem.set_bit(asid, 0x10, PteBit::User, false).unwrap();
        // warm entry on core 0 still grants access
        assert!(mem.access(0, asid, Mode::User, AccessKind::Read, va).unwrap().tlb_hit);
        // core 1 walks the current PTE
        assert!(mem.access(1, asid, Mode::User, AccessKind::Read, va).is_err());
        mem.tlb_flush(asid, 0x10, &[0, 1].into_iter().collect());
        let err = mem.access(0, asid, Mode::User, AccessKind::Read, va).unwrap_err();
        assert_eq!(err.reason, FaultReason::UserBitViolation);
    }

    #[test]
    fn empty_flush_is_noop() {
        let (mut mem, asid, _) = setup();
        mem.access(0, asid, Mode::User, AccessKind::Read, page_base(0x10)).unwrap();
        mem.tlb_flush(asid, 0x10, &BTreeSet::new());
        assert!(mem.tlb(0).lookup(asid, 0x10).is_some());
    }

    #[test]
    fn set_bit_returns_previous() {
        let (mut mem, asid, _) = setup();
        assert!(mem.set_bit(asid, 0x10, PteBit::Writable, false).unwrap());
        assert!(!mem.set_bit(asid, 0x10, PteBit::Writable, false).unwrap());
        assert_eq!(
            mem.set_bit(asid, 0x99, PteBit::User, false),
            Err(VmError::Unmapped { asid, vpn: 0x99 })
        );
    }

    #[test]
    fn fork_then_write_is_private() {
        let (mut mem, parent, f) = setup();
        let va = page_base(0x10);
        mem.poke(parent, va, b"orig").unwrap();
        let child = mem.fork_space(parent).unwrap();
        let err = mem.access(0, child, Mode::User, AccessKind::Write, va).unwrap_err();
        assert_eq!(err.reason, FaultReason::CowPending);
        let fresh = mem.cow_resolve(child, 0x10).unwrap();
        assert_ne!(fresh, f);
        mem.write_bytes(0, child, Mode::User, va, b"kid!").unwrap();
        assert_eq!(mem.peek(parent, va, 4).unwrap(), b"orig");
        assert_eq!(mem.peek(child, va, 4).unwrap(), b"kid!");
        assert!(mem.aliases_of(f).iter().all(|a| a.asid != child));
        assert_eq!(mem.cow_resolve(child, 0x10), Err(VmError::NotCow { asid: child, vpn: 0x10 }));
    }

    #[test]
    fn vmas_are_canonical() {
        let mut mem = Memory::new(1);
        let asid = mem.create_space();
        for vpn in 0..4 {
            let f = mem.alloc_frame();
            mem.map(asid, vpn, f, Perms::USER_RW, false).unwrap();
        }
        assert_eq!(mem.vmas(asid).len(), 1);
        mem.set_vm_write(asid, 2, false).unwrap();
        assert_eq!(mem.vmas(asid).len(), 3);
        mem.set_vm_write(asid, 2, true).unwrap();
        assert_eq!(mem.vmas(asid), vec![Vma { start: 0, end: 3, vm_write: true, vm_exec: false, shared: false }]);
    }

    #[test]
    fn writes_are_all_or_nothing() {
        let mut mem = Memory::new(1);
        let asid = mem.create_space();
        let a = mem.alloc_frame();
        let b = mem.alloc_frame();
        mem.map(asid, 0, a, Perms::USER_RW, false).unwrap();
        mem.map(asid, 1, b, Perms::USER_RO, false).unwrap();
        let err = mem.write_bytes(0, asid, Mode::User, 4090, &[1u8; 12]).unwrap_err();
        assert_eq!(err.reason, FaultReason::WriteViolation);
        assert!(mem.frame_bytes(a).iter().all(|&x| x == 0));
    }
}
