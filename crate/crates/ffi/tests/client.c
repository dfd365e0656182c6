#include <stdio.h>
#include <stdlib.h>
#include "steerkit.h"

#define CHECK(call)                                                        \
  do {                                                                     \
    SteerkitStatus s_ = (call);                                            \
    if (s_ != STEERKIT_STATUS_OK) {                                        \
      fprintf(stderr, "%s: %d %s\n", #call, (int)s_, steerkit_last_error()); \
      return 1;                                                            \
    }                                                                      \
  } while (0)

int main(int argc, char **argv) {
  if (argc != 2) return 2;
  SteerkitCheckpoint *ck = NULL;
  SteerkitStatus s = steerkit_checkpoint_load("/nonexistent/x.ckpt", &ck);
  printf("missing: status %d\n", (int)s);

  CHECK(steerkit_checkpoint_load(argv[1], &ck));
  size_t d = 0, side = 0;
  CHECK(steerkit_checkpoint_dims(ck, &d, &side));
  printf("dim %zu side %zu\n", d, side);

  size_t n = side * side * 3;
  float *img = malloc(n * sizeof(float));
  float *aug = malloc(n * sizeof(float));
  float *e = malloc(d * sizeof(float));
  float *steered = malloc(d * sizeof(float));
  for (size_t i = 0; i < n; i++) img[i] = (float)(i % 7) / 7.0f;

  double geo[4] = {0.1, 0.0, 0.8, 0.8};
  CHECK(steerkit_augment(img, side, STEERKIT_KIND_GEO, geo, 4, aug));
  CHECK(steerkit_embed(ck, aug, 1, side, e, d));
  double wm = 0.0;
  CHECK(steerkit_default_wm(ck, &wm));
  double photo[3] = {0.5, 0.0, 0.0};
  CHECK(steerkit_delta_steer(ck, STEERKIT_KIND_PHOTO, e, d, photo, 3, wm, steered));
  printf("wm %.1f first %f\n", wm, steered[0]);

  free(img);
  free(aug);
  free(e);
  free(steered);
  steerkit_checkpoint_free(ck);
  return 0;
}
