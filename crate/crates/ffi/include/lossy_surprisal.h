#ifndef LOSSY_SURPRISAL_H
#define LOSSY_SURPRISAL_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum LslStatus {
  LSL_STATUS_OK = 0,
  LSL_STATUS_NULL_POINTER = 1,
  LSL_STATUS_INVALID_ARGUMENT = 2,
  LSL_STATUS_PARSE = 3,
  LSL_STATUS_IO = 4,
  LSL_STATUS_NUMERICAL = 5,
  LSL_STATUS_BUFFER_TOO_SMALL = 6,
  LSL_STATUS_PANIC = 7,
} LslStatus;

/**
 * Fitted mixed-effects model.
 */
typedef struct LslFit LslFit;

/**
 * Trained or loaded n-gram model.
 */
typedef struct LslNgramModel LslNgramModel;

/**
 * Scalar results of a fit: log-likelihood, residual variance and the two
 * random-intercept variances.
 */
typedef struct LslFitSummary {
  double loglik;
  double sigma2;
  double var_article;
  double var_subject;
  size_t n_rows;
  int converged;
} LslFitSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread; valid until the next call
 * into the library from the same thread.
 */
const char *lsl_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *lsl_version(void);

/**
 * Trains an n-gram model on `text`: one sentence per line, tokens
 * separated by whitespace.
 *
 * # Safety
 * `text` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum LslStatus lsl_ngram_train(const char *text, size_t order, struct LslNgramModel **out);

/**
 * Loads a model written in the library's TSV format.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum LslStatus lsl_ngram_load(const char *path, struct LslNgramModel **out);

/**
 * Per-subword surprisals (nats) of the whitespace-separated `target`
 * after `<s>` (`bos != 0`) or `<b>`, followed by `context`.
 *
 * # Safety
 * `model` must come from this library; strings must be NUL-terminated;
 * `out` must hold `cap` doubles.
 */
enum LslStatus lsl_ngram_score(const struct LslNgramModel *model,
                               int bos,
                               const char *context,
                               const char *target,
                               double *out,
                               size_t cap,
                               size_t *len);

/**
 * # Safety
 * `model` must come from this library or be null; it must not be used
 * afterwards.
 */
void lsl_ngram_free(struct LslNgramModel *model);

/**
 * Indices of the context words kept by a noise specification such as
 * `"ngram:3"` or `"lpen:l=2,a=0.25,seed=7"`.
 *
 * # Safety
 * Strings must be NUL-terminated; `out` must hold `cap` elements.
 */
enum LslStatus lsl_noise_kept_indices(const char *spec,
                                      const char *article_id,
                                      size_t sent_n,
                                      size_t token_n,
                                      size_t context_len,
                                      size_t *out,
                                      size_t cap,
                                      size_t *len);

/**
 * ML fit of `y ~ X + (1 | article) + (1 | subject)`. `x` is row-major
 * `n x p` and should contain the intercept column.
 *
 * # Safety
 * Arrays must hold `n * p`, `n`, `n` and `n` elements; `out` must be valid.
 */
enum LslStatus lsl_lmm_fit(const double *x,
                           size_t n,
                           size_t p,
                           const double *y,
                           const uint32_t *article,
                           const uint32_t *subject,
                           struct LslFit **out);

/**
 * Fits the nested pair: the full model uses all `p` columns, the reduced
 * one the first `p_reduced`. The reduced fit seeds the full one, so the
 * full log-likelihood never falls below the reduced one.
 *
 * # Safety
 * As for [`lsl_lmm_fit`]; both output pointers must be valid.
 */
enum LslStatus lsl_lmm_fit_nested(const double *x,
                                  size_t n,
                                  size_t p,
                                  size_t p_reduced,
                                  const double *y,
                                  const uint32_t *article,
                                  const uint32_t *subject,
                                  struct LslFit **out_full,
                                  struct LslFit **out_reduced);

/**
 * # Safety
 * `fit` must come from this library and `out` must be valid.
 */
enum LslStatus lsl_fit_summary(const struct LslFit *fit, struct LslFitSummary *out);

/**
 * # Safety
 * `fit` must come from this library; `out` must hold `cap` doubles.
 */
enum LslStatus lsl_fit_beta(const struct LslFit *fit, double *out, size_t cap, size_t *len);

/**
 * Residuals in input row order.
 *
 * # Safety
 * `fit` must come from this library; `out` must hold `cap` doubles.
 */
enum LslStatus lsl_fit_residuals(const struct LslFit *fit, double *out, size_t cap, size_t *len);

/**
 * # Safety
 * `fit` must come from this library or be null; it must not be used
 * afterwards.
 */
void lsl_fit_free(struct LslFit *fit);

/**
 * Per-row log-likelihood gain of `with` over `without`.
 *
 * # Safety
 * Both fits must come from this library; `out` must be valid.
 */
enum LslStatus lsl_ppp(const struct LslFit *with, const struct LslFit *without, double *out);

/**
 * Paired sign-flip permutation test on `a - b`.
 *
 * # Safety
 * `a` and `b` must hold `n` doubles; output pointers must be valid.
 */
enum LslStatus lsl_paired_permutation_test(const double *a,
                                           const double *b,
                                           size_t n,
                                           size_t n_perm,
                                           uint64_t seed,
                                           double *mean_diff,
                                           double *p_value);

/**
 * Chi-square upper-tail p for the statistic `2 (loglik_with - loglik_without)`.
 *
 * # Safety
 * `out` must be valid.
 */
enum LslStatus lsl_chisq_nested(double loglik_with,
                                double loglik_without,
                                uint32_t df,
                                double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LOSSY_SURPRISAL_H */
