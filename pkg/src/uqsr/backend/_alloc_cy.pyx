# cython: boundscheck=False, wraparound=False, cdivision=True
"""Caching NumPy data allocator.

First-touch page faults are expensive under the sandboxed kernels this
package typically runs on (tens of ms per 44 MB buffer), and the training
loop allocates identically-shaped large buffers every step. This handler
keeps freed blocks >= 64 KiB on exact-size free lists, capped in total
bytes, so steady-state steps run fault-free. Install with
`install_cache()`; `UQSR_ALLOC_CACHE=0` disables it at import.
"""

from libc.stdlib cimport free as c_free
from libc.stdlib cimport calloc as c_calloc
from libc.stdlib cimport malloc as c_malloc
from libc.stdlib cimport realloc as c_realloc
from libc.string cimport memset, strcpy

cimport numpy as cnp
from cpython.pycapsule cimport PyCapsule_New

cnp.import_array()

cdef extern from "numpy/arrayobject.h":
    ctypedef struct PyDataMemAllocator:
        void *ctx
        void *(*malloc)(void *ctx, size_t size) nogil
        void *(*calloc)(void *ctx, size_t nelem, size_t elsize) nogil
        void *(*realloc)(void *ctx, void *ptr, size_t new_size) nogil
        void (*free)(void *ctx, void *ptr, size_t size) nogil

    ctypedef struct PyDataMem_Handler:
        char name[127]
        cnp.uint8_t version
        PyDataMemAllocator allocator

    object PyDataMem_SetHandler(object handler)

cdef extern from "pthread.h" nogil:
    ctypedef struct pthread_mutex_t:
        pass
    int pthread_mutex_init(pthread_mutex_t *, void *)
    int pthread_mutex_lock(pthread_mutex_t *)
    int pthread_mutex_unlock(pthread_mutex_t *)


cdef enum:
    MIN_CACHED = 65536        # blocks below this go straight to malloc
    N_BINS = 128              # distinct sizes tracked
    BIN_DEPTH = 6             # blocks kept per size

cdef struct Bin:
    size_t size
    int count
    void *blocks[BIN_DEPTH]

cdef Bin _bins[N_BINS]
cdef size_t _cached_bytes = 0
cdef size_t _max_bytes = 1 << 30
cdef size_t _hits = 0
cdef size_t _misses = 0
cdef pthread_mutex_t _lock
cdef bint _initialised = False


cdef void *_cache_take(size_t size) nogil:
    global _cached_bytes, _hits, _misses
    cdef int i
    cdef void *ptr = NULL
    if size < MIN_CACHED:
        return NULL
    pthread_mutex_lock(&_lock)
    for i in range(N_BINS):
        if _bins[i].size == size and _bins[i].count > 0:
            _bins[i].count -= 1
            ptr = _bins[i].blocks[_bins[i].count]
            _cached_bytes -= size
            _hits += 1
            break
    if ptr == NULL:
        _misses += 1
    pthread_mutex_unlock(&_lock)
    return ptr


cdef bint _cache_put(void *ptr, size_t size) nogil:
    """Take ownership of ptr; returns False if the caller must free it."""
    global _cached_bytes
    cdef int i, empty = -1
    cdef bint stored = False
    if size < MIN_CACHED or size + _cached_bytes > _max_bytes:
        return False
    pthread_mutex_lock(&_lock)
    for i in range(N_BINS):
        if _bins[i].size == size:
            if _bins[i].count < BIN_DEPTH:
                _bins[i].blocks[_bins[i].count] = ptr
                _bins[i].count += 1
                _cached_bytes += size
                stored = True
            break
        if empty < 0 and _bins[i].size == 0:
            empty = i
    else:
        if empty >= 0:
            _bins[empty].size = size
            _bins[empty].blocks[0] = ptr
            _bins[empty].count = 1
            _cached_bytes += size
            stored = True
    pthread_mutex_unlock(&_lock)
    return stored


cdef void *_c_malloc(void *ctx, size_t size) noexcept nogil:
    cdef void *ptr = _cache_take(size)
    if ptr != NULL:
        return ptr
    return c_malloc(size)


cdef void *_c_calloc(void *ctx, size_t nelem, size_t elsize) noexcept nogil:
    cdef size_t size = nelem * elsize
    cdef void *ptr = _cache_take(size)
    if ptr != NULL:
        memset(ptr, 0, size)
        return ptr
    return c_calloc(nelem, elsize)


cdef void *_c_realloc(void *ctx, void *ptr, size_t new_size) noexcept nogil:
    # realloc'd blocks bypass the cache; numpy uses it rarely (resize()).
    return c_realloc(ptr, new_size)


cdef void _c_free(void *ctx, void *ptr, size_t size) noexcept nogil:
    if ptr == NULL:
        return
    if not _cache_put(ptr, size):
        c_free(ptr)


cdef PyDataMem_Handler _handler

strcpy(_handler.name, b"uqsr_cached_allocator")
_handler.version = 1
_handler.allocator.ctx = NULL
_handler.allocator.malloc = _c_malloc
_handler.allocator.calloc = _c_calloc
_handler.allocator.realloc = _c_realloc
_handler.allocator.free = _c_free

_installed = False
_previous = None


def install_cache(max_bytes=1 << 30):
    """Install the caching allocator (idempotent). Returns True if active."""
    global _initialised, _installed, _previous, _max_bytes
    if not _initialised:
        pthread_mutex_init(&_lock, NULL)
        memset(<void *> _bins, 0, sizeof(_bins))
        _initialised = True
    _max_bytes = max_bytes
    if not _installed:
        capsule = PyCapsule_New(<void *> &_handler, "mem_handler", NULL)
        _previous = PyDataMem_SetHandler(capsule)
        _installed = True
    return True


def cache_stats():
    return {"cached_bytes": _cached_bytes, "hits": _hits, "misses": _misses}
