/* Host implementation of the four runtime primitives. Copies are deferred
 * to dma_wait, so a missing wait leaves stale data behind, and a second
 * offload to a busy engine aborts. */
#include <stdint.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>

typedef uint32_t td_dma_handle_t;

#define MAX_PENDING 65536
#define MAX_ENGINES 16

typedef struct {
    const uint8_t *src;
    uint8_t *dst;
    uint32_t rows, row_bytes, src_stride, dst_stride;
    int live;
} pending_t;

static pending_t pending[MAX_PENDING];
static uint32_t next_handle;
static int busy[MAX_ENGINES];
uint32_t host_outstanding;

td_dma_handle_t dma_copy_2d(const void *src, void *dst, uint32_t rows, uint32_t row_bytes, uint32_t src_stride,
                            uint32_t dst_stride)
{
    uint32_t h = next_handle++ % MAX_PENDING;
    if (pending[h].live) {
        fprintf(stderr, "dma: handle table full\n");
        exit(3);
    }
    pending[h].src = (const uint8_t *)src;
    pending[h].dst = (uint8_t *)dst;
    pending[h].rows = rows;
    pending[h].row_bytes = row_bytes;
    pending[h].src_stride = src_stride;
    pending[h].dst_stride = dst_stride;
    pending[h].live = 1;
    ++host_outstanding;
    return h;
}

void dma_wait(td_dma_handle_t handle)
{
    pending_t *p = &pending[handle % MAX_PENDING];
    uint32_t r;
    if (!p->live) {
        fprintf(stderr, "dma: wait on idle handle %u\n", handle);
        exit(3);
    }
    for (r = 0; r < p->rows; ++r) {
        memmove(p->dst + (size_t)r * p->dst_stride, p->src + (size_t)r * p->src_stride, p->row_bytes);
    }
    p->live = 0;
    --host_outstanding;
}

void offload(uint32_t engine_id, void (*fn)(void *), void *env)
{
    if (engine_id >= MAX_ENGINES || busy[engine_id]) {
        fprintf(stderr, "offload: engine %u busy\n", engine_id);
        exit(3);
    }
    busy[engine_id] = 1;
    fn(env);
}

void offload_wait(uint32_t engine_id)
{
    if (engine_id >= MAX_ENGINES || !busy[engine_id]) {
        fprintf(stderr, "offload_wait: engine %u idle\n", engine_id);
        exit(3);
    }
    busy[engine_id] = 0;
}
