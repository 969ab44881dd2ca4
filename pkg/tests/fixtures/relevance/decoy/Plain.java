import java.util.List;
import java.util.Random;

class Plain {
    int roll() { return new Random().nextInt(6); }
}
