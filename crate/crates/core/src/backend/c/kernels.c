/*@ common */
static int64_t td_round_shift(int64_t v, int32_t shift)
{
    int64_t half;
    if (shift == 0) {
        return v;
    }
    half = (int64_t)1 << (shift - 1);
    return v >= 0 ? (v + half) >> shift : -((-v + half) >> shift);
}

static int8_t td_rq(int64_t acc, int32_t mul, int32_t shift, int32_t zp)
{
    int64_t v = zp + td_round_shift(acc * mul, shift);
    return (int8_t)(v < -128 ? -128 : (v > 127 ? 127 : v));
}

static void td_copy_bytes(uint8_t *dst, const uint8_t *src, uint32_t n)
{
    uint32_t i;
    for (i = 0; i < n; ++i) {
        dst[i] = src[i];
    }
}

/*@ td_gemm */
/* b is [batch][o][n]; bias_mode 0: none, 1: [o], 2: [m][o]. */
static void td_gemm(const int8_t *a, const int8_t *b, const int32_t *bias, int32_t *y, uint32_t batch, uint32_t m,
                    uint32_t n, uint32_t o, uint32_t bias_mode)
{
    uint32_t t, i, j, k;
    for (t = 0; t < batch; ++t) {
        for (i = 0; i < m; ++i) {
            for (j = 0; j < o; ++j) {
                const int8_t *ar = a + ((size_t)t * m + i) * n;
                const int8_t *br = b + ((size_t)t * o + j) * n;
                int64_t acc = bias_mode == 1 ? bias[j] : (bias_mode == 2 ? bias[i * o + j] : 0);
                for (k = 0; k < n; ++k) {
                    acc += (int64_t)ar[k] * br[k];
                }
                y[((size_t)t * m + i) * o + j] = (int32_t)acc;
            }
        }
    }
}

/*@ td_gemm_q8 */
static void td_gemm_q8(const int8_t *a, const int8_t *b, const int32_t *bias, int8_t *y, uint32_t batch, uint32_t m,
                       uint32_t n, uint32_t o, uint32_t bias_mode, int32_t mul, int32_t shift, int32_t zp)
{
    uint32_t t, i, j, k;
    for (t = 0; t < batch; ++t) {
        for (i = 0; i < m; ++i) {
            for (j = 0; j < o; ++j) {
                const int8_t *ar = a + ((size_t)t * m + i) * n;
                const int8_t *br = b + ((size_t)t * o + j) * n;
                int64_t acc = bias_mode == 1 ? bias[j] : (bias_mode == 2 ? bias[i * o + j] : 0);
                for (k = 0; k < n; ++k) {
                    acc += (int64_t)ar[k] * br[k];
                }
                y[((size_t)t * m + i) * o + j] = td_rq((int32_t)acc, mul, shift, zp);
            }
        }
    }
}

/*@ td_conv_pw */
/* Pointwise convolution over w pixels; weights are [cout][cin]. */
static void td_conv_pw(const int8_t *x, const int8_t *wt, const int32_t *bias, int8_t *y, uint32_t w, uint32_t cin,
                       uint32_t cout, int32_t mul, int32_t shift, int32_t zp)
{
    uint32_t p, c, k;
    for (p = 0; p < w; ++p) {
        for (c = 0; c < cout; ++c) {
            int64_t acc = bias ? bias[c] : 0;
            for (k = 0; k < cin; ++k) {
                acc += (int64_t)x[(size_t)p * cin + k] * wt[(size_t)c * cin + k];
            }
            y[(size_t)p * cout + c] = td_rq((int32_t)acc, mul, shift, zp);
        }
    }
}

/*@ td_requant */
static void td_requant(const int32_t *x, int8_t *y, uint32_t numel, int32_t mul, int32_t shift, int32_t zp)
{
    uint32_t i;
    for (i = 0; i < numel; ++i) {
        y[i] = td_rq(x[i], mul, shift, zp);
    }
}

/*@ td_rms_norm */
static uint64_t td_isqrt(uint64_t n)
{
    uint64_t x;
    uint32_t bits = 0, i;
    if (n == 0) {
        return 0;
    }
    for (x = n; x; x >>= 1) {
        ++bits;
    }
    x = (uint64_t)1 << ((bits + 1) / 2);
    for (i = 0; i < 4; ++i) {
        x = (x + n / x) / 2;
    }
    if (x * x > n) {
        x -= 1;
    } else if ((x + 1) * (x + 1) <= n) {
        x += 1;
    }
    return x;
}

static void td_rms_norm(const int8_t *x, const int8_t *g, int8_t *y, uint32_t rows, uint32_t d, int64_t eps, int32_t mul,
                        int32_t shift, int32_t zp)
{
    uint32_t r, j;
    for (r = 0; r < rows; ++r) {
        const int8_t *xr = x + (size_t)r * d;
        int64_t ss = 0, rms;
        for (j = 0; j < d; ++j) {
            ss += (int64_t)xr[j] * xr[j];
        }
        rms = (int64_t)td_isqrt((uint64_t)(ss / (int64_t)d + eps));
        if (rms == 0) {
            rms = 1;
        }
        for (j = 0; j < d; ++j) {
            int64_t num = (int64_t)xr[j] * g[j] * 65536 / rms;
            y[(size_t)r * d + j] = td_rq(num, mul, shift, zp);
        }
    }
}

/*@ td_rope */
/* Rotates pairs inside each head; row r reads table row pos + r. */
static void td_rope(const int8_t *x, const int16_t *cs, const int16_t *sn, int8_t *y, uint32_t rows, uint32_t d,
                    uint32_t head_dim, uint32_t pos, int32_t mul, int32_t shift, int32_t zp)
{
    uint32_t r, h, i, half = head_dim / 2;
    for (r = 0; r < rows; ++r) {
        for (h = 0; h < d / head_dim; ++h) {
            for (i = 0; i < half; ++i) {
                size_t c0 = (size_t)r * d + h * head_dim + 2 * i;
                int64_t a = x[c0], b = x[c0 + 1];
                int64_t c = cs[(size_t)(pos + r) * half + i], s = sn[(size_t)(pos + r) * half + i];
                y[c0] = td_rq(a * c - b * s, mul, shift, zp);
                y[c0 + 1] = td_rq(a * s + b * c, mul, shift, zp);
            }
        }
    }
}

/*@ td_softmax */
/* Softmax along rows of d; row0 is the index of the first row inside its
 * matrix, for causal masking of tiles. e holds one row of exponents. */
static void td_softmax(const int8_t *x, int8_t *y, int32_t *e, uint32_t rows, uint32_t rows_per_mat, uint32_t d,
                       uint32_t row0, int64_t q_ln2, int64_t q_b, int64_t q_c, uint32_t in_shift, uint32_t out_bits,
                       uint32_t causal, int64_t causal_offset)
{
    uint32_t r, j;
    int64_t top = ((int64_t)1 << out_bits) - 1;
    for (r = 0; r < rows; ++r) {
        const int8_t *xr = x + (size_t)r * d;
        int8_t *yr = y + (size_t)r * d;
        int64_t i = (int64_t)(r % rows_per_mat + row0);
        int32_t m = -129;
        int64_t sum = 0;
        for (j = 0; j < d; ++j) {
            yr[j] = 0;
            if (xr[j] != -128 && !(causal && (int64_t)j > i + causal_offset) && xr[j] > m) {
                m = xr[j];
            }
        }
        if (m == -129) {
            continue;
        }
        for (j = 0; j < d; ++j) {
            e[j] = 0;
            if (xr[j] != -128 && !(causal && (int64_t)j > i + causal_offset)) {
                int64_t q = (int64_t)(xr[j] - m) * ((int64_t)1 << in_shift);
                int64_t z = -q / q_ln2;
                if (z < 32) {
                    int64_t t = q + z * q_ln2 + q_b;
                    e[j] = (int32_t)((t * t + q_c) >> z);
                }
            }
            sum += e[j];
        }
        if (sum == 0) {
            continue;
        }
        for (j = 0; j < d; ++j) {
            yr[j] = (int8_t)((int64_t)e[j] * top / sum);
        }
    }
}

/*@ td_add */
static void td_add(const int8_t *a, const int8_t *b, int8_t *y, uint32_t numel, int32_t mul_a, int32_t mul_b,
                   int32_t shift, int32_t zp)
{
    uint32_t i;
    for (i = 0; i < numel; ++i) {
        y[i] = td_rq((int64_t)a[i] * mul_a + (int64_t)b[i] * mul_b, 1, shift, zp);
    }
}

/*@ td_mul */
static void td_mul(const int8_t *a, const int8_t *b, int8_t *y, uint32_t numel, int32_t mul, int32_t shift, int32_t zp)
{
    uint32_t i;
    for (i = 0; i < numel; ++i) {
        y[i] = td_rq((int64_t)a[i] * b[i], mul, shift, zp);
    }
}

/*@ td_hardswish */
static void td_hardswish(const int8_t *x, int8_t *y, uint32_t numel, int32_t three, int32_t six, int32_t mul,
                         int32_t shift, int32_t zp)
{
    uint32_t i;
    for (i = 0; i < numel; ++i) {
        int64_t t = (int64_t)x[i] + three;
        t = t < 0 ? 0 : (t > six ? six : t);
        y[i] = td_rq(x[i] * t, mul, shift, zp);
    }
}

/*@ td_gather_rows */
/* Out-of-range indices yield zero rows. */
static void td_gather_rows(const int8_t *table, const int32_t *idx, int8_t *y, uint32_t rows, uint32_t d, uint32_t vocab)
{
    uint32_t r, j;
    for (r = 0; r < rows; ++r) {
        int32_t v = idx[r];
        for (j = 0; j < d; ++j) {
            y[(size_t)r * d + j] = (v >= 0 && (uint32_t)v < vocab) ? table[(size_t)v * d + j] : 0;
        }
    }
}

/*@ td_concat_seq */
static void td_concat_seq(const void *a, const void *b, void *y, uint32_t rows0, uint32_t rows1, uint32_t row_bytes,
                          uint32_t stride0, uint32_t stride1)
{
    const uint8_t *pa = (const uint8_t *)a, *pb = (const uint8_t *)b;
    uint8_t *py = (uint8_t *)y;
    uint32_t r;
    for (r = 0; r < rows0; ++r) {
        td_copy_bytes(py + (size_t)r * row_bytes, pa + (size_t)r * stride0, row_bytes);
    }
    for (r = 0; r < rows1; ++r) {
        td_copy_bytes(py + (size_t)(rows0 + r) * row_bytes, pb + (size_t)r * stride1, row_bytes);
    }
}

/*@ td_transpose */
/* Output dim k is input dim perm[k]; rank at most 8. */
static void td_transpose(const void *x, void *y, uint32_t elem, uint32_t rank, const uint32_t *in_dims,
                         const uint32_t *perm)
{
    const uint8_t *px = (const uint8_t *)x;
    uint8_t *py = (uint8_t *)y;
    uint32_t idx[8], st[8], k, total = 1;
    size_t n;
    for (k = rank; k-- > 0;) {
        st[k] = total;
        total *= in_dims[k];
        idx[k] = 0;
    }
    for (n = 0; n < total; ++n) {
        size_t src = 0;
        for (k = 0; k < rank; ++k) {
            src += (size_t)idx[k] * st[perm[k]];
        }
        td_copy_bytes(py + n * elem, px + src * elem, elem);
        for (k = rank; k-- > 0;) {
            if (++idx[k] < in_dims[perm[k]]) {
                break;
            }
            idx[k] = 0;
        }
    }
}

/*@ td_split_heads */
/* [rows][heads * dh] -> [heads][rows][dh] */
static void td_split_heads(const void *x, void *y, uint32_t elem, uint32_t heads, uint32_t rows, uint32_t dh)
{
    uint32_t h, r;
    size_t row = (size_t)dh * elem;
    for (h = 0; h < heads; ++h) {
        for (r = 0; r < rows; ++r) {
            td_copy_bytes((uint8_t *)y + ((size_t)h * rows + r) * row, (const uint8_t *)x + ((size_t)r * heads + h) * row,
                          (uint32_t)row);
        }
    }
}

/*@ td_merge_heads */
/* [heads][rows][dh] -> [rows][heads * dh] */
static void td_merge_heads(const void *x, void *y, uint32_t elem, uint32_t heads, uint32_t rows, uint32_t dh)
{
    uint32_t h, r;
    size_t row = (size_t)dh * elem;
    for (h = 0; h < heads; ++h) {
        for (r = 0; r < rows; ++r) {
            td_copy_bytes((uint8_t *)y + ((size_t)r * heads + h) * row, (const uint8_t *)x + ((size_t)h * rows + r) * row,
                          (uint32_t)row);
        }
    }
}

/*@ dma */
typedef struct {
    uint8_t operand;
    uint8_t inbound;
    uint32_t src;
    uint32_t dst;
    uint32_t rows;
    uint32_t row_bytes;
    uint32_t src_stride;
    uint32_t dst_stride;
} td_desc_t;

/* Issues descriptors [lo, hi) of a step's table. Inbound copies run from the
 * operand's home buffer into its tile arena, outbound ones the other way. */
static uint32_t td_issue(const td_desc_t *d, uint32_t lo, uint32_t hi, uint8_t *const *home, uint8_t *const *tile,
                         td_dma_handle_t *h)
{
    uint32_t i;
    for (i = lo; i < hi; ++i) {
        const td_desc_t *x = &d[i];
        const uint8_t *src = (x->inbound ? home : tile)[x->operand] + x->src;
        uint8_t *dst = (x->inbound ? tile : home)[x->operand] + x->dst;
        h[i - lo] = dma_copy_2d(src, dst, x->rows, x->row_bytes, x->src_stride, x->dst_stride);
    }
    return hi - lo;
}

static void td_await(const td_dma_handle_t *h, uint32_t n)
{
    uint32_t i;
    for (i = 0; i < n; ++i) {
        dma_wait(h[i]);
    }
}
