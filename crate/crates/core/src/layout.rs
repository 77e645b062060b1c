//! Address arithmetic: size classes, the heap/subheap/bag geometry, and the
//! bidirectional object ↔ shadow-word mapping.
//!
//! The small-object region is one huge reservation divided into heaps; each
//! heap holds one subheap per thread slot; each subheap holds one bag per
//! size class, placed in ascending class order. Because every level is a
//! fixed stride, any address decomposes into `(heap, thread, class, slot)`
//! with shifts and two constant divisions, and each slot owns exactly one
//! word of shadow metadata at an address computable the same way. All
//! functions here are pure; geometry is immutable once built.

/// Number of size classes: 16 B .. 1 MiB, powers of two.
pub const NUM_CLASSES: usize = 17;

/// log2 of the smallest class (16 bytes).
pub const MIN_CLASS_SHIFT: u32 = 4;

/// Capacity of the largest class; anything that cannot fit here (with its
/// canary byte) takes the large-object path.
pub const LARGE_THRESHOLD: usize = 1 << 20;

/// Shadow words are one machine word per slot.
pub const WORD_SIZE: usize = 8;

#[inline]
pub fn class_size(class: usize) -> usize {
    1 << (MIN_CLASS_SHIFT + class as u32)
}

/// Smallest class whose slot holds `request` bytes plus the trailing canary
/// byte, or `None` for the large-object path. Zero-byte requests are served
/// from the smallest class.
#[inline]
pub fn size_class_for(request: usize) -> Option<usize> {
    let need = request.max(1).checked_add(1)?;
    if need > LARGE_THRESHOLD {
        return None;
    }
    let shift = need.next_power_of_two().trailing_zeros().max(MIN_CLASS_SHIFT);
    Some((shift - MIN_CLASS_SHIFT) as usize)
}

/// A decomposed small-object location.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SlotLoc {
    pub heap: usize,
    pub thread: usize,
    pub class: usize,
    pub slot: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutGeometry {
    pub heap_base: usize,
    pub shadow_base: usize,
    pub bag_size: usize,
    pub num_classes: usize,
    pub max_threads: usize,
    pub num_heaps: usize,
    /// num_classes × bag_size.
    pub subheap_stride: usize,
    /// max_threads × subheap_stride.
    pub heap_stride: usize,
    /// Shadow bytes per bag, uniform across classes: one word per
    /// smallest-class slot. Larger classes leave the tail words unused.
    pub shadow_stride_per_bag: usize,
    /// Total small-object bytes: num_heaps × heap_stride.
    pub heap_span: usize,
    /// Total shadow bytes: total bags × shadow_stride_per_bag.
    pub shadow_span: usize,
}

impl LayoutGeometry {
    /// Build a geometry. `heap_base` must be `bag_size`-aligned so slots are
    /// class-aligned as absolute addresses; `shadow_base` must be
    /// word-aligned. Reduced geometries (small bags, few classes) are legal
    /// and used by exhaustive tests; run configuration limits are enforced
    /// separately by `AllocatorConfig::validate`.
    pub fn new(
        heap_base: usize,
        shadow_base: usize,
        bag_size: usize,
        num_classes: usize,
        max_threads: usize,
        num_heaps: usize,
    ) -> Self {
        assert!(bag_size.is_power_of_two());
        assert!(num_classes >= 1 && num_classes <= NUM_CLASSES);
        assert!(max_threads >= 1);
        assert!(num_heaps >= 1);
        let largest = class_size(num_classes - 1);
        assert!(
            bag_size / 4 >= largest,
            "each bag quadrant must hold at least one slot of the largest class"
        );
        assert_eq!(heap_base % bag_size, 0, "heap base must be bag-aligned");
        assert_eq!(shadow_base % WORD_SIZE, 0);
        let subheap_stride = num_classes * bag_size;
        let heap_stride = max_threads * subheap_stride;
        let shadow_stride_per_bag = (bag_size >> MIN_CLASS_SHIFT) * WORD_SIZE;
        let total_bags = num_heaps * max_threads * num_classes;
        LayoutGeometry {
            heap_base,
            shadow_base,
            bag_size,
            num_classes,
            max_threads,
            num_heaps,
            subheap_stride,
            heap_stride,
            shadow_stride_per_bag,
            heap_span: num_heaps * heap_stride,
            shadow_span: total_bags * shadow_stride_per_bag,
        }
    }

    /// One quarter of a bag: the contiguous region owned by one bump chain.
    #[inline]
    pub fn quad_size(&self) -> usize {
        self.bag_size / 4
    }

    /// Guard granule for a class: whole pages for sub-page classes, whole
    /// slots for classes of a page or more.
    #[inline]
    pub fn granule(&self, class: usize, page: usize) -> usize {
        class_size(class).max(page)
    }

    #[inline]
    pub fn slots_per_bag(&self, class: usize) -> usize {
        self.bag_size / class_size(class)
    }

    #[inline]
    pub fn contains_small(&self, addr: usize) -> bool {
        addr >= self.heap_base && addr - self.heap_base < self.heap_span
    }

    #[inline]
    pub fn contains_shadow(&self, addr: usize) -> bool {
        addr >= self.shadow_base && addr - self.shadow_base < self.shadow_span
    }

    /// Offset of an in-region address within its bag.
    #[inline]
    pub fn bag_offset(&self, addr: usize) -> usize {
        (addr - self.heap_base) & (self.bag_size - 1)
    }

    /// Global ordinal of a bag; bags are laid out contiguously so the
    /// ordinal is also `(addr - heap_base) / bag_size`.
    #[inline]
    pub fn bag_ordinal(&self, heap: usize, thread: usize, class: usize) -> usize {
        (heap * self.max_threads + thread) * self.num_classes + class
    }

    #[inline]
    pub fn bag_base(&self, heap: usize, thread: usize, class: usize) -> usize {
        self.heap_base + self.bag_ordinal(heap, thread, class) * self.bag_size
    }

    /// Total function: `None` means the address is outside the small-object
    /// region. The slot index is the bag offset divided by the class size
    /// even when the address is not slot-aligned; alignment is the caller's
    /// check.
    #[inline]
    pub fn decompose(&self, addr: usize) -> Option<SlotLoc> {
        if !self.contains_small(addr) {
            return None;
        }
        let off = addr - self.heap_base;
        let bag = off / self.bag_size;
        let class = bag % self.num_classes;
        let per_heap = bag / self.num_classes;
        let thread = per_heap % self.max_threads;
        let heap = per_heap / self.max_threads;
        let slot = (off & (self.bag_size - 1)) / class_size(class);
        Some(SlotLoc {
            heap,
            thread,
            class,
            slot,
        })
    }

    /// Inverse of `decompose` for slot starts.
    #[inline]
    pub fn compose(&self, loc: SlotLoc) -> usize {
        self.bag_base(loc.heap, loc.thread, loc.class) + loc.slot * class_size(loc.class)
    }

    /// Address of the shadow word holding `loc`'s status.
    #[inline]
    pub fn shadow_for(&self, loc: SlotLoc) -> usize {
        self.shadow_base
            + self.bag_ordinal(loc.heap, loc.thread, loc.class) * self.shadow_stride_per_bag
            + loc.slot * WORD_SIZE
    }

    /// Object slot whose status lives at `shadow_addr`. `None` for addresses
    /// outside the shadow region, off word boundaries, or in the unused tail
    /// words of bags whose class is larger than the minimum.
    #[inline]
    pub fn object_for(&self, shadow_addr: usize) -> Option<usize> {
        if !self.contains_shadow(shadow_addr) {
            return None;
        }
        let off = shadow_addr - self.shadow_base;
        if off % WORD_SIZE != 0 {
            return None;
        }
        let bag = off / self.shadow_stride_per_bag;
        let word = (off % self.shadow_stride_per_bag) / WORD_SIZE;
        let class = bag % self.num_classes;
        if word >= self.slots_per_bag(class) {
            return None;
        }
        Some(self.heap_base + bag * self.bag_size + word * class_size(class))
    }
}
