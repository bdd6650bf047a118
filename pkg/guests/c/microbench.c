/* microbench — native protocol guest with a fixed page arena.
 *
 *     microbench <arena_pages>
 *
 * Speaks the supervisor's line protocol on stdin/stdout: one request
 * {"id": ..., "value": {"op": ..., ...}} per line in, one response
 * {"id": ..., "result": ...} per line out.  Ops mirror the reference guest:
 *
 *     bench(dirty=K)      write one byte to each of K arena pages, then read
 *                         one byte back from every mapped page
 *     mmap(pages=N)       map and touch a private region -> {"addr": A}
 *     munmap(addr=A)      unmap a region mapped above
 *     brk_grow(pages=N)   grow the program break and touch the gain
 *     leak(bytes=N)       allocate and never free
 *     store_secret(token) keep the token in process memory
 *     find_secret(token)  scan own readable memory -> {"found": bool}
 *     report_writes()     addresses the last bench wrote
 *
 * Everything the request loop touches is statically allocated, so the pages a
 * bench dirties inside the arena are exactly the K it was asked for.  The
 * whole arena is touched at startup so later requests measure dirty tracking,
 * not first-fault paging.  For find_secret the token is copied out of the raw
 * request line into a fixed needle buffer and masked in place, keeping exactly
 * one forward copy at a known address; the scan excludes that address span,
 * its own scratch window, and the receive buffer, so any other sighting is a
 * genuine leftover.
 */

#define _GNU_SOURCE
#include <errno.h>
#include <fcntl.h>
#include <stdint.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <sys/mman.h>
#include <unistd.h>

#define PAGE 4096
#define LINE_MAX_BYTES (1 << 20)
#define OUT_MAX_BYTES (4 << 20)
#define SCRATCH_BYTES (1 << 20)
#define NEEDLE_MAX 512
#define SECRETS_MAX (1 << 16)
#define EXTRA_MAX 128
#define MAPS_MAX (1 << 16)

static char inbuf[LINE_MAX_BYTES];
static size_t in_len;
static char scratch[SCRATCH_BYTES];
static char maps_buf[MAPS_MAX];
static unsigned char needle[NEEDLE_MAX];
static size_t needle_len;
static char secrets[SECRETS_MAX];
static size_t secrets_len;
static int secrets_count;

static unsigned char *arena;
static long arena_pages;
static long counter;
static struct { unsigned long base; long pages; int value; } last_write;
static struct { unsigned long addr; size_t len; } extras[EXTRA_MAX];
static int extra_count;
static size_t leaked_total;

/* ----------------------------------------------------------- tiny parsing */

/* Returns a pointer just past `"key":` (whitespace skipped), or NULL. */
static const char *after_key(const char *buf, size_t len, const char *key)
{
    char pat[64];
    int n = snprintf(pat, sizeof pat, "\"%s\"", key);
    const char *end = buf + len;
    for (const char *p = buf; p + n < end; p++) {
        if (memcmp(p, pat, n) != 0)
            continue;
        p += n;
        while (p < end && (*p == ' ' || *p == '\t'))
            p++;
        if (p < end && *p == ':') {
            p++;
            while (p < end && (*p == ' ' || *p == '\t'))
                p++;
            return p;
        }
    }
    return NULL;
}

static int parse_long_field(const char *buf, size_t len, const char *key, long *out)
{
    const char *p = after_key(buf, len, key);
    if (!p)
        return 0;
    char *end;
    errno = 0;
    long v = strtol(p, &end, 10);
    if (end == p || errno != 0)
        return 0;
    *out = v;
    return 1;
}

/* Copies the raw JSON scalar after `"id":` (quoted string or bare token). */
static void extract_raw_id(const char *buf, size_t len, char *dst, size_t dst_max)
{
    memcpy(dst, "\"?\"", 4);
    const char *p = after_key(buf, len, "id");
    if (!p)
        return;
    const char *end = buf + len;
    const char *stop;
    if (*p == '"') {
        stop = p + 1;
        while (stop < end && *stop != '"') {
            if (*stop == '\\' && stop + 1 < end)
                stop++;
            stop++;
        }
        if (stop >= end)
            return;
        stop++;
    } else {
        stop = p;
        while (stop < end && *stop != ',' && *stop != '}' && *stop != ' ')
            stop++;
        if (stop == p)
            return;
    }
    size_t n = (size_t)(stop - p);
    if (n + 1 > dst_max)
        return;
    memcpy(dst, p, n);
    dst[n] = '\0';
}

static int extract_op(const char *buf, size_t len, char *dst, size_t dst_max)
{
    const char *p = after_key(buf, len, "op");
    if (!p || *p != '"')
        return 0;
    const char *stop = memchr(p + 1, '"', (size_t)(buf + len - p - 1));
    if (!stop)
        return 0;
    size_t n = (size_t)(stop - p - 1);
    if (n + 1 > dst_max)
        return 0;
    memcpy(dst, p + 1, n);
    dst[n] = '\0';
    return 1;
}

/* Pulls the find_secret token out of the raw line and masks it in place. */
static void extract_needle(char *buf, size_t len)
{
    needle_len = 0;
    const char *p = after_key(buf, len, "token");
    if (!p || *p != '"')
        return;
    char *start = (char *)p + 1;
    char *stop = memchr(start, '"', (size_t)(buf + len - start));
    if (!stop || (size_t)(stop - start) > NEEDLE_MAX)
        return;
    needle_len = (size_t)(stop - start);
    memcpy(needle, start, needle_len);
    memset(start, '#', needle_len);
}

/* ------------------------------------------------------------------- ops */

static int op_bench(const char *line, size_t len, char *res, size_t res_max)
{
    long dirty = 0;
    parse_long_field(line, len, "dirty", &dirty);
    if (dirty < 0 || dirty > arena_pages)
        return snprintf(res, res_max, "{\"error\":\"dirty must be in [0, %ld]\"}",
                        arena_pages);
    counter++;
    int value = (int)(counter % 250) + 1;
    for (long i = 0; i < dirty; i++)
        arena[i * PAGE] = (unsigned char)value;
    last_write.base = (unsigned long)arena;
    last_write.pages = dirty;
    last_write.value = value;
    unsigned long long sum = 0;
    for (long i = 0; i < arena_pages; i++)
        sum += arena[i * PAGE];
    long pages_read = arena_pages;
    for (int e = 0; e < extra_count; e++) {
        const unsigned char *base = (const unsigned char *)extras[e].addr;
        for (size_t off = 0; off < extras[e].len; off += PAGE)
            sum += base[off];
        pages_read += (long)(extras[e].len / PAGE);
    }
    return snprintf(res, res_max,
                    "{\"ok\":true,\"dirtied\":%ld,\"pages_read\":%ld,\"sum\":%llu}",
                    dirty, pages_read, sum);
}

static int op_mmap(const char *line, size_t len, char *res, size_t res_max)
{
    long pages = 0;
    if (!parse_long_field(line, len, "pages", &pages) || pages < 1)
        return snprintf(res, res_max, "{\"error\":\"pages must be a positive integer\"}");
    if (extra_count == EXTRA_MAX)
        return snprintf(res, res_max, "{\"error\":\"too many live mappings\"}");
    unsigned char *region = mmap(NULL, (size_t)pages * PAGE, PROT_READ | PROT_WRITE,
                                 MAP_PRIVATE | MAP_ANONYMOUS, -1, 0);
    if (region == MAP_FAILED)
        return snprintf(res, res_max, "{\"error\":\"mmap failed: %s\"}", strerror(errno));
    for (long i = 0; i < pages; i++)
        region[i * PAGE] = 2;
    extras[extra_count].addr = (unsigned long)region;
    extras[extra_count].len = (size_t)pages * PAGE;
    extra_count++;
    return snprintf(res, res_max, "{\"addr\":%lu,\"pages\":%ld}",
                    (unsigned long)region, pages);
}

static int op_munmap(const char *line, size_t len, char *res, size_t res_max)
{
    long addr = 0;
    parse_long_field(line, len, "addr", &addr);
    for (int e = 0; e < extra_count; e++) {
        if (extras[e].addr != (unsigned long)addr)
            continue;
        munmap((void *)extras[e].addr, extras[e].len);
        extras[e] = extras[--extra_count];
        return snprintf(res, res_max, "{\"ok\":true}");
    }
    return snprintf(res, res_max, "{\"error\":\"no region mapped at %ld\"}", addr);
}

static int op_brk_grow(const char *line, size_t len, char *res, size_t res_max)
{
    long pages = 0;
    if (!parse_long_field(line, len, "pages", &pages) || pages < 1)
        return snprintf(res, res_max, "{\"error\":\"pages must be a positive integer\"}");
    void *old = sbrk(pages * PAGE);
    if (old == (void *)-1)
        return snprintf(res, res_max, "{\"error\":\"sbrk failed\"}");
    memset(old, 3, (size_t)pages * PAGE);
    return snprintf(res, res_max, "{\"old_brk\":%lu,\"brk\":%lu}",
                    (unsigned long)old, (unsigned long)sbrk(0));
}

static int op_leak(const char *line, size_t len, char *res, size_t res_max)
{
    long bytes = 0;
    if (!parse_long_field(line, len, "bytes", &bytes) || bytes < 1)
        return snprintf(res, res_max, "{\"error\":\"bytes must be a positive integer\"}");
    char *block = malloc((size_t)bytes);
    if (!block)
        return snprintf(res, res_max, "{\"error\":\"malloc failed\"}");
    memset(block, 'L', (size_t)bytes);
    leaked_total += (size_t)bytes;
    return snprintf(res, res_max, "{\"leaked_total\":%zu}", leaked_total);
}

static int op_store_secret(const char *line, size_t len, char *res, size_t res_max)
{
    const char *p = after_key(line, len, "token");
    if (!p || *p != '"')
        return snprintf(res, res_max, "{\"error\":\"token must be a nonempty string\"}");
    const char *start = p + 1;
    const char *stop = memchr(start, '"', (size_t)(line + len - start));
    if (!stop || stop == start)
        return snprintf(res, res_max, "{\"error\":\"token must be a nonempty string\"}");
    size_t n = (size_t)(stop - start);
    if (secrets_len + n + 1 > SECRETS_MAX)
        return snprintf(res, res_max, "{\"error\":\"secret store full\"}");
    memcpy(secrets + secrets_len, start, n);
    secrets_len += n;
    secrets[secrets_len++] = '\0';
    secrets_count++;
    return snprintf(res, res_max, "{\"ok\":true,\"stored\":%d}", secrets_count);
}

/* Search every readable mapping for the needle via /proc/self/mem, reading
 * through the scratch window with windows overlapped by needle_len-1 so a
 * match straddling two reads is still seen. */
static int scan_self(void)
{
    unsigned long needle_lo = (unsigned long)needle;
    unsigned long needle_hi = needle_lo + NEEDLE_MAX;
    unsigned long own[][2] = {
        { (unsigned long)scratch, (unsigned long)scratch + SCRATCH_BYTES },
        { (unsigned long)inbuf, (unsigned long)inbuf + LINE_MAX_BYTES },
    };

    int maps_fd = open("/proc/self/maps", O_RDONLY);
    if (maps_fd < 0)
        return 0;
    ssize_t maps_len = 0;
    for (;;) {
        ssize_t got = read(maps_fd, maps_buf + maps_len, MAPS_MAX - 1 - maps_len);
        if (got <= 0)
            break;
        maps_len += got;
    }
    close(maps_fd);
    maps_buf[maps_len] = '\0';

    int mem_fd = open("/proc/self/mem", O_RDONLY);
    if (mem_fd < 0)
        return 0;
    int found = 0;
    char *save = NULL;
    for (char *ln = strtok_r(maps_buf, "\n", &save); ln && !found;
         ln = strtok_r(NULL, "\n", &save)) {
        unsigned long lo, hi;
        char perms[8] = { 0 };
        if (sscanf(ln, "%lx-%lx %4s", &lo, &hi, perms) != 3 || perms[0] != 'r')
            continue;
        if (strstr(ln, "[vvar") || strstr(ln, "[vsyscall]"))
            continue;
        /* clip the scan's own windows out of the range */
        unsigned long spans[8][2] = { { lo, hi } };
        int span_count = 1;
        for (size_t s = 0; s < sizeof own / sizeof own[0]; s++) {
            unsigned long next[8][2];
            int next_count = 0;
            for (int i = 0; i < span_count; i++) {
                unsigned long a = spans[i][0], b = spans[i][1];
                if (own[s][1] <= a || b <= own[s][0]) {
                    next[next_count][0] = a, next[next_count][1] = b, next_count++;
                    continue;
                }
                if (a < own[s][0])
                    next[next_count][0] = a, next[next_count][1] = own[s][0], next_count++;
                if (own[s][1] < b)
                    next[next_count][0] = own[s][1], next[next_count][1] = b, next_count++;
            }
            memcpy(spans, next, sizeof next);
            span_count = next_count;
        }
        for (int i = 0; i < span_count && !found; i++) {
            unsigned long pos = spans[i][0];
            while (pos < spans[i][1]) {
                size_t want = spans[i][1] - pos;
                if (want > SCRATCH_BYTES)
                    want = SCRATCH_BYTES;
                ssize_t got = pread(mem_fd, scratch, want, (off_t)pos);
                if (got <= 0 || (size_t)got < needle_len)
                    break;
                for (char *at = scratch;
                     (at = memmem(at, (size_t)(scratch + got - at), needle, needle_len));
                     at++) {
                    unsigned long absolute = pos + (unsigned long)(at - scratch);
                    if (!(needle_lo <= absolute && absolute < needle_hi)) {
                        found = 1;
                        break;
                    }
                }
                if (found || (size_t)got < want)
                    break;
                pos += (size_t)got - (needle_len - 1);
            }
        }
    }
    close(mem_fd);
    return found;
}

static int op_find_secret(char *res, size_t res_max)
{
    if (!needle_len)
        return snprintf(res, res_max, "{\"error\":\"token must be a nonempty string\"}");
    return snprintf(res, res_max, "{\"found\":%s}", scan_self() ? "true" : "false");
}

static int op_report_writes(char *res, size_t res_max)
{
    int n = snprintf(res, res_max, "{\"addresses\":[");
    for (long i = 0; i < last_write.pages; i++) {
        n += snprintf(res + n, res_max - (size_t)n, "%s%lu", i ? "," : "",
                      last_write.base + (unsigned long)i * PAGE);
        if ((size_t)n + 64 > res_max)
            return snprintf(res, res_max, "{\"error\":\"write set too large to report\"}");
    }
    n += snprintf(res + n, res_max - (size_t)n,
                  "],\"arena\":[%lu,%lu],\"value\":%d}", (unsigned long)arena,
                  (unsigned long)arena + (unsigned long)arena_pages * PAGE,
                  last_write.value);
    return n;
}

/* ------------------------------------------------------------- main loop */

static void respond(const char *id, const char *result)
{
    static char line[OUT_MAX_BYTES + 256];
    int n = snprintf(line, sizeof line, "{\"id\":%s,\"result\":%s}\n", id, result);
    ssize_t done = 0;
    while (done < n) {
        ssize_t wrote = write(1, line + done, (size_t)(n - done));
        if (wrote <= 0)
            exit(1);
        done += wrote;
    }
}

static void handle(char *line, size_t len)
{
    static char id[256];
    static char op[64];
    static char result[OUT_MAX_BYTES];

    if (memmem(line, len, "\"find_secret\"", 13))
        extract_needle(line, len);
    extract_raw_id(line, len, id, sizeof id);
    if (!after_key(line, len, "value") || !extract_op(line, len, op, sizeof op)) {
        respond(id, "{\"error\":\"value must be an object with an 'op' field\"}");
        return;
    }
    if (!strcmp(op, "bench"))
        op_bench(line, len, result, sizeof result);
    else if (!strcmp(op, "mmap"))
        op_mmap(line, len, result, sizeof result);
    else if (!strcmp(op, "munmap"))
        op_munmap(line, len, result, sizeof result);
    else if (!strcmp(op, "brk_grow"))
        op_brk_grow(line, len, result, sizeof result);
    else if (!strcmp(op, "leak"))
        op_leak(line, len, result, sizeof result);
    else if (!strcmp(op, "store_secret"))
        op_store_secret(line, len, result, sizeof result);
    else if (!strcmp(op, "find_secret"))
        op_find_secret(result, sizeof result);
    else if (!strcmp(op, "report_writes"))
        op_report_writes(result, sizeof result);
    else
        snprintf(result, sizeof result, "{\"error\":\"unknown op '%s'\"}", op);
    respond(id, result);
}

int main(int argc, char **argv)
{
    if (argc != 2) {
        dprintf(2, "usage: microbench <arena_pages>\n");
        return 2;
    }
    arena_pages = strtol(argv[1], NULL, 10);
    if (arena_pages < 1) {
        dprintf(2, "microbench: arena_pages must be positive\n");
        return 2;
    }
    arena = mmap(NULL, (size_t)arena_pages * PAGE, PROT_READ | PROT_WRITE,
                 MAP_PRIVATE | MAP_ANONYMOUS, -1, 0);
    if (arena == MAP_FAILED) {
        dprintf(2, "microbench: cannot map %ld pages: %s\n", arena_pages,
                strerror(errno));
        return 2;
    }
    for (long i = 0; i < arena_pages; i++)
        arena[i * PAGE] = 1;

    for (;;) {
        char *cut;
        while (!(cut = memchr(inbuf, '\n', in_len))) {
            if (in_len == LINE_MAX_BYTES) {
                dprintf(2, "microbench: request line too long\n");
                return 1;
            }
            ssize_t got = read(0, inbuf + in_len, LINE_MAX_BYTES - in_len);
            if (got <= 0)
                return 0;
            in_len += (size_t)got;
        }
        size_t line_len = (size_t)(cut - inbuf);
        if (line_len > 0)
            handle(inbuf, line_len);
        /* wipe the consumed line so stray request bytes never linger */
        size_t rest = in_len - line_len - 1;
        memmove(inbuf, cut + 1, rest);
        memset(inbuf + rest, 0, in_len - rest);
        in_len = rest;
    }
}
